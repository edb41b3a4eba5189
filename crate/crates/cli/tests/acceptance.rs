//! CLI-level acceptance: the full smoke pipeline is reproducible byte for
//! byte, finishes inside its budget, and the command surface honors its
//! error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn v2m() -> Command {
    Command::new(env!("CARGO_BIN_EXE_v2m"))
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// All files under a directory as (relative path, bytes), sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap())
            .collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn run_smoke(root: &Path) {
    let ds = root.join("dataset");
    let pre = root.join("pretrain");
    let gen = root.join("model");
    let smp = root.join("latents");
    let rep = root.join("report");
    ok(&v2m()
        .args(["synth", "--clips", "12", "--seed", "9"])
        .args(["--set", "synth.min_duration_s=6", "--set", "synth.max_duration_s=10"])
        .arg("--out")
        .arg(&ds)
        .output()
        .unwrap());
    ok(&v2m()
        .args(["pretrain", "--steps", "200", "--batch", "8", "--seed", "9"])
        .args(["--set", "optim.lr=0.001"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&pre)
        .output()
        .unwrap());
    ok(&v2m()
        .args(["train", "--steps", "500", "--batch", "8", "--seed", "9"])
        .args(["--set", "optim.lr=0.001"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--pretrain")
        .arg(&pre)
        .arg("--out")
        .arg(&gen)
        .output()
        .unwrap());
    ok(&v2m()
        .args(["sample", "--ids", "clip_0000,clip_0001", "--runs", "2", "--seed", "9"])
        .arg("--model")
        .arg(&gen)
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&smp)
        .output()
        .unwrap());
    ok(&v2m()
        .arg("eval")
        .arg("--gen")
        .arg(&smp)
        .arg("--dataset")
        .arg(&ds)
        .arg("--ckpt")
        .arg(&pre)
        .arg("--out")
        .arg(&rep)
        .output()
        .unwrap());
}

#[test]
fn criterion_11_smoke_pipeline_is_deterministic() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let run1 = tmp.path().join("run1");
    run_smoke(&run1);
    let first_elapsed = t0.elapsed();
    let run2 = tmp.path().join("run2");
    run_smoke(&run2);

    let (a, b) = (snapshot(&run1), snapshot(&run2));
    assert_eq!(a.len(), b.len(), "file sets differ");
    for ((pa, da), (pb, db)) in a.iter().zip(&b) {
        assert_eq!(pa, pb, "file names diverge");
        assert_eq!(da, db, "bytes differ in {}", pa.display());
    }
    // checkpoints, latents and reports all byte-identical; the single run
    // also has to fit the smoke budget
    assert!(
        first_elapsed.as_secs() < 600,
        "smoke run took {first_elapsed:?}"
    );
    println!(
        "ACCEPTANCE 11 determinism: PASS ({} files byte-identical, first run {:.0}s)",
        a.len(),
        first_elapsed.as_secs_f64()
    );
}

#[test]
fn eval_of_reference_latents_scores_perfectly() {
    // ground-truth music presented as generated output: BCS = BHS = 100
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&v2m()
        .args(["synth", "--clips", "4", "--seed", "3"])
        .args(["--set", "synth.min_duration_s=8", "--set", "synth.max_duration_s=12"])
        .arg("--out")
        .arg(&ds)
        .output()
        .unwrap());
    let gen = tmp.path().join("gen");
    std::fs::create_dir_all(&gen).unwrap();
    for i in 0..4 {
        std::fs::copy(
            ds.join(format!("clip_{i:04}.music.mvt")),
            gen.join(format!("clip_{i:04}.run0.gen.mvt")),
        )
        .unwrap();
    }
    let rep = tmp.path().join("report");
    let out = v2m()
        .arg("eval")
        .arg("--gen")
        .arg(&gen)
        .arg("--dataset")
        .arg(&ds)
        .arg("--out")
        .arg(&rep)
        .output()
        .unwrap();
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(rep.join("report.json")).unwrap()).unwrap();
    let (bcs, bhs) = (
        report["mean_bcs"].as_f64().unwrap(),
        report["mean_bhs"].as_f64().unwrap(),
    );
    assert!((bcs - 100.0).abs() < 1e-9, "BCS {bcs}");
    assert!((bhs - 100.0).abs() < 1e-9, "BHS {bhs}");
    assert!(rep.join("report.csv").exists());
}

#[test]
fn missing_input_exits_3_with_error_json() {
    let out = v2m()
        .args(["pretrain", "--dataset", "/no/such/dir", "--out", "/tmp/x-v2m-none"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let err: serde_json::Value = serde_json::from_str(line).expect("stderr is not JSON");
    assert_eq!(err["error"]["kind"], "input");
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = v2m()
        .args(["synth", "--clips", "2", "--set", "bogus.key=1"])
        .arg("--out")
        .arg(tmp.path().join("ds"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let err: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn train_requires_init_choice() {
    let out = v2m()
        .args(["train", "--dataset", "/tmp", "--out", "/tmp/x-v2m-none2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn beat_track_emits_documented_json() {
    let tmp = tempfile::tempdir().unwrap();
    // render a click track through the library, then track it via the CLI
    let beats = v2m_core_click(tmp.path());
    let out_json = tmp.path().join("beats.json");
    ok(&v2m()
        .arg("beat-track")
        .arg("--input")
        .arg(tmp.path().join("click.wav"))
        .arg("--out")
        .arg(&out_json)
        .output()
        .unwrap());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out_json).unwrap()).unwrap();
    assert!(report["tempo_curve"].is_array());
    assert!(report["beats_s"].is_array());
    assert!(report["minimal_cycle_frames"].is_u64());
    let tracked = report["beats_s"].as_array().unwrap().len();
    assert!((tracked as i64 - beats as i64).abs() <= 2, "{tracked} vs {beats} beats");
}

fn v2m_core_click(dir: &Path) -> usize {
    use v2m_core::beat::BeatGrid;
    let times: Vec<f64> = (0..16).map(|i| 0.2 + i as f64 * 0.5).collect();
    let count = times.len();
    let grid = BeatGrid::from_beats(times, 120.0, 10.0);
    let pcm = v2m_core::synthdata::render_click(&grid, 24_000).unwrap();
    v2m_core::wav::write_wav_mono16(&dir.join("click.wav"), &pcm, 24_000).unwrap();
    count
}
