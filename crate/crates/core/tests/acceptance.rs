//! Acceptance suite. Each test prints one PASS line; criteria cover the
//! gradient oracle, contrastive loss algebra, negative-sampling rules, the
//! beat tracker, beat matching, the ODE solver, guidance identities,
//! in-context generation, and scaled-down trend reproduction.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2m_core::adaptor::Scope;
use v2m_core::beat::{onset_envelope, track, BeatTrackConfig};
use v2m_core::config::RunConfig;
use v2m_core::contrastive::{
    apply_shift, loss_semantic_from_matrix, loss_temporal_from_matrices, random_replacement,
    sim_matrix, ReplacementRule, ShiftRule,
};
use v2m_core::flowgen::{
    cfg_velocity, euler_integrate, euler_sample, rfm_loss_graph, CondInput, DitConfig,
    IclContext, SamplerConfig, StepPlan, VelocityModel,
};
use v2m_core::gradcheck::grad_check;
use v2m_core::graph::{Graph, NodeId};
use v2m_core::metrics::{bcs, bhs, match_beats, BeatSet};
use v2m_core::params::Binding;
use v2m_core::pipeline::{
    latent_beats, pretrain_pool, sample_clip, sim_metric, train_pool,
};
use v2m_core::synthdata::{gen_pair, render_click, SyntheticClip};
use v2m_core::tensor::Tensor;

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_gradient_suite() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, err: f64| {
        assert!(err < 1e-5, "{name}: relative error {err}");
        if err > worst {
            worst = err;
        }
    };

    // elementwise binary ops, same-shape and broadcast
    let a = Tensor::randn(&[3, 4], &mut rng);
    let b = Tensor::randn(&[3, 4], &mut rng).map(|v| v + 3.0);
    let row = Tensor::randn(&[4], &mut rng).map(|v| v + 3.0);
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let op = f;
        let err = grad_check(
            move |g, ids| {
                let y = match op {
                    0 => g.add(ids[0], ids[1]),
                    1 => g.sub(ids[0], ids[1]),
                    2 => g.mul(ids[0], ids[1]),
                    _ => g.div(ids[0], ids[1]),
                };
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        check(name, err);
        let err_b = grad_check(
            move |g, ids| {
                let y = match op {
                    0 => g.add(ids[0], ids[1]),
                    1 => g.sub(ids[0], ids[1]),
                    2 => g.mul(ids[0], ids[1]),
                    _ => g.div(ids[0], ids[1]),
                };
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[a.clone(), row.clone()],
            1e-5,
        )
        .unwrap();
        check(&format!("{name}-broadcast"), err_b);
    }

    // scalar ops and unary maps
    let x = Tensor::randn(&[5], &mut rng);
    let pos = x.map(|v| v.abs() + 0.5);
    check(
        "add_scalar/mul_scalar",
        grad_check(
            |g, ids| {
                let y = g.add_scalar(ids[0], 1.7);
                let z = g.mul_scalar(y, -0.3);
                let sq = g.mul(z, z);
                g.sum_all(sq)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "exp",
        grad_check(
            |g, ids| {
                let y = g.exp(ids[0]);
                g.sum_all(y)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "log",
        grad_check(
            |g, ids| {
                let y = g.log(ids[0]);
                g.sum_all(y)
            },
            &[pos.clone()],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "sigmoid",
        grad_check(
            |g, ids| {
                let y = g.sigmoid(ids[0]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap(),
    );

    // matmul: plain, batched, and rank-2 broadcast over a batch
    let m1 = Tensor::randn(&[3, 4], &mut rng);
    let m2 = Tensor::randn(&[4, 2], &mut rng);
    check(
        "matmul",
        grad_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[m1, m2],
            1e-5,
        )
        .unwrap(),
    );
    let bm1 = Tensor::randn(&[2, 3, 4], &mut rng);
    let bm2 = Tensor::randn(&[2, 4, 2], &mut rng);
    let flat = Tensor::randn(&[2, 3], &mut rng);
    check(
        "matmul-batched",
        grad_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[bm1.clone(), bm2],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "matmul-broadcast",
        grad_check(
            |g, ids| {
                let y = g.matmul(ids[1], ids[0]); // [2,3] x [2,3,4]
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[bm1, flat],
            1e-5,
        )
        .unwrap(),
    );

    // reductions, softmax, norms, rotations
    let t3 = Tensor::randn(&[2, 3, 4], &mut rng);
    check(
        "sum_axis",
        grad_check(
            |g, ids| {
                let y = g.sum_axis(ids[0], 1, true);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[t3.clone()],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "mean_axis+sum_all",
        grad_check(
            |g, ids| {
                let y = g.mean_axis(ids[0], 2, false);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[t3.clone()],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "softmax",
        grad_check(
            |g, ids| {
                let y = g.softmax(ids[0], 1);
                let w = g.mul(y, ids[0]);
                g.sum_all(w)
            },
            &[t3.clone()],
            1e-5,
        )
        .unwrap(),
    );
    let gain = Tensor::randn(&[4], &mut rng).map(|v| v + 2.0);
    check(
        "rms_norm",
        grad_check(
            |g, ids| {
                let y = g.rms_norm(ids[0], ids[1], 1e-6);
                let sq = g.mul(y, y);
                let s = g.sum_all(sq);
                g.log(s)
            },
            &[t3.clone(), gain],
            1e-5,
        )
        .unwrap(),
    );
    let rt = Tensor::randn(&[3, 2, 4], &mut rng);
    check(
        "rope_apply",
        grad_check(
            |g, ids| {
                let y = g.rope(ids[0], &[0, 1, 2], 10_000.0);
                let w = g.mul(y, ids[0]);
                g.sum_all(w)
            },
            &[rt],
            1e-5,
        )
        .unwrap(),
    );

    // convolution, shape ops, lookup, similarity
    let cx = Tensor::randn(&[2, 4, 4, 3], &mut rng);
    let cw = Tensor::randn(&[3, 3, 3, 2], &mut rng);
    check(
        "conv2d",
        grad_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, 1);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[cx.clone(), cw],
            1e-5,
        )
        .unwrap(),
    );
    let dw = Tensor::randn(&[2, 2, 3, 3], &mut rng);
    check(
        "conv2d-stride2",
        grad_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 2, 0);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[cx, dw],
            1e-5,
        )
        .unwrap(),
    );
    check(
        "concat+slice+reshape+permute",
        grad_check(
            |g, ids| {
                let p = g.permute(ids[0], &[1, 0, 2]);
                let r = g.reshape(p, &[3, 8]);
                let lo = g.slice(r, 1, 0, 5);
                let hi = g.slice(r, 1, 5, 8);
                let back = g.concat(1, &[hi, lo]);
                let sq = g.mul(back, back);
                g.sum_all(sq)
            },
            &[t3.clone()],
            1e-5,
        )
        .unwrap(),
    );
    let table = Tensor::randn(&[4, 3], &mut rng);
    check(
        "embed",
        grad_check(
            |g, ids| {
                let y = g.embed(ids[0], &[2, 0, 2, 1]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            &[table],
            1e-5,
        )
        .unwrap(),
    );
    let ca = Tensor::randn(&[4, 5], &mut rng);
    let cb = Tensor::randn(&[4, 5], &mut rng);
    check(
        "cosine_rows",
        grad_check(
            |g, ids| {
                let y = g.cosine_rows(ids[0], ids[1]);
                g.sum_all(y)
            },
            &[ca, cb],
            1e-5,
        )
        .unwrap(),
    );

    // composed losses
    let m = 3;
    let (n, c) = (4, 6);
    let mut emb_inputs = Vec::new();
    for _ in 0..3 * m {
        emb_inputs.push(Tensor::randn(&[n, c], &mut rng));
    }
    emb_inputs.push(Tensor::scalar(0.07f64.ln()));
    for temporal in [false, true] {
        let err = grad_check(
            |g, ids| {
                let music: Vec<NodeId> = ids[0..m].to_vec();
                let video: Vec<NodeId> = ids[m..2 * m].to_vec();
                let extra: Vec<NodeId> = ids[2 * m..3 * m].to_vec();
                let s = sim_matrix(g, &music, &video);
                if temporal {
                    let sh = sim_matrix(g, &extra, &video);
                    let rev: Vec<NodeId> = extra.iter().rev().copied().collect();
                    let rp = sim_matrix(g, &rev, &video);
                    loss_temporal_from_matrices(g, s, sh, rp, ids[3 * m], false).unwrap()
                } else {
                    loss_semantic_from_matrix(g, s, ids[3 * m]).unwrap()
                }
            },
            &emb_inputs,
            1e-5,
        )
        .unwrap();
        check(if temporal { "loss_temporal" } else { "loss_semantic" }, err);
    }

    let model = VelocityModel::new(DitConfig {
        latent_channels: 3,
        model_dim: 8,
        layers: 1,
        heads: 2,
        time_embed_dim: 8,
        rope_base: 10_000.0,
        rms_eps: 1e-6,
    })
    .unwrap();
    let params = model.init_params(&mut rng);
    let z1 = Tensor::randn(&[4, 3], &mut rng);
    let z0 = Tensor::randn(&[4, 3], &mut rng);
    let names: Vec<String> = params.names().cloned().collect();
    let mut inputs = vec![Tensor::randn(&[4, 8], &mut rng)];
    inputs.extend(names.iter().map(|nm| params.get(nm).clone()));
    let plan = StepPlan { drop_cond: false, context_frames: 1, t: 0.37 };
    let err = grad_check(
        |g, ids| {
            let binding =
                Binding::from_ids(names.iter().cloned().zip(ids[1..].iter().copied()));
            let scope = Scope::root(&binding);
            rfm_loss_graph(g, &model, &scope, &z1, &z0, Some(ids[0]), &plan).unwrap()
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    check("loss_rfm", err);

    let dt = t0.elapsed();
    assert!(dt.as_secs() < 60, "gradient suite took {dt:?}");
    println!(
        "ACCEPTANCE 1 gradient suite: PASS (worst rel err {worst:.2e}, {:.1}s)",
        dt.as_secs_f64()
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_contrastive_loss_algebra() {
    // L_S(M=1) = 0 exactly
    let mut g = Graph::new();
    let lt = g.input(Tensor::scalar(0.07f64.ln()));
    let s1 = g.input(Tensor::new(vec![1, 1], vec![0.4]));
    let l1 = loss_semantic_from_matrix(&mut g, s1, lt).unwrap();
    assert_eq!(g.value(l1).item(), 0.0);

    // L_S(M=2, all-equal sims) = ln 2
    let s2 = g.input(Tensor::filled(&[2, 2], 0.3));
    let l2 = loss_semantic_from_matrix(&mut g, s2, lt).unwrap();
    assert!((g.value(l2).item() - 2f64.ln()).abs() < 1e-9);

    // L_T(M=1, all-equal sims) = 0.5 ln 3
    let b = g.input(Tensor::filled(&[1, 1], 0.4));
    let sh = g.input(Tensor::filled(&[1, 1], 0.4));
    let rp = g.input(Tensor::filled(&[1, 1], 0.4));
    let l3 = loss_temporal_from_matrices(&mut g, b, sh, rp, lt, false).unwrap();
    assert!((g.value(l3).item() - 0.5 * 3f64.ln()).abs() < 1e-9);

    // L_T >= L_S on 100 random batches
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC2);
    for _ in 0..100 {
        let m = rng.random_range(1..6usize);
        let mut gg = Graph::new();
        let ltn = gg.input(Tensor::scalar(rng.random_range(0.02..0.5f64).ln()));
        let base = gg.input(Tensor::uniform(&[m, m], -1.0, 1.0, &mut rng));
        let shn = gg.input(Tensor::uniform(&[m, m], -1.0, 1.0, &mut rng));
        let rpn = gg.input(Tensor::uniform(&[m, m], -1.0, 1.0, &mut rng));
        let ls = loss_semantic_from_matrix(&mut gg, base, ltn).unwrap();
        let ltv = loss_temporal_from_matrices(&mut gg, base, shn, rpn, ltn, false).unwrap();
        assert!(gg.value(ltv).item() >= gg.value(ls).item() - 1e-12);
    }
    println!("ACCEPTANCE 2 contrastive loss algebra: PASS");
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_shift_rule_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
    for n in [3usize, 10, 24] {
        for total in [60usize, 100, 300] {
            let rule = ShiftRule { minimal_cycle: n, total_len: total };
            let residues = rule.allowed_residues();
            assert!(!residues.is_empty());
            for _ in 0..10_000 {
                let s = rule.sample(&mut rng).unwrap();
                assert_ne!(s, 0);
                assert!(
                    2 * (s.unsigned_abs() as usize) < total,
                    "|{s}| >= 0.5 * {total}"
                );
                let m = (s.unsigned_abs() as usize) % n;
                assert!(
                    residues.contains(&m),
                    "residue {m} of shift {s} outside {residues:?} (n={n})"
                );
            }
        }
    }
    println!("ACCEPTANCE 3 shift-rule suite: PASS (9 configurations x 10^4 draws)");
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_replacement_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC4);
    let rule = ReplacementRule::default();
    for _ in 0..1000 {
        let n = rng.random_range(40..200usize);
        let music = Tensor::randn(&[n, 3], &mut rng);
        let donor = Tensor::randn(&[n, 3], &mut rng);
        let (out, rep) = random_replacement(&music, &donor, &rule, &mut rng).unwrap();
        let lo = (0.2 * n as f64).ceil() as usize;
        let hi = (0.4 * n as f64).floor() as usize;
        assert!(rep.len >= lo && rep.len <= hi, "len {} outside [{lo}, {hi}]", rep.len);
        for t in 0..n {
            if t < rep.start - rep.fade || t >= rep.start + rep.len + rep.fade {
                for ch in 0..3 {
                    assert_eq!(out.at(&[t, ch]), music.at(&[t, ch]), "frame {t} modified");
                }
            }
        }
        for k in 0..rep.fade {
            let alpha = (k + 1) as f64 / (rep.fade + 1) as f64;
            let (go, gd) = ((1.0 - alpha).sqrt(), alpha.sqrt());
            assert!((go * go + gd * gd - 1.0).abs() < 1e-9);
        }
    }
    println!("ACCEPTANCE 4 replacement suite: PASS (10^3 draws)");
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_beat_tracker_oracle() {
    let t0 = Instant::now();
    let sr = 24_000u32;
    for bpm in [60.0, 90.0, 120.0, 180.0] {
        let period = 60.0 / bpm;
        let mut times = Vec::new();
        let mut t = 0.1;
        while t < 10.0 - 0.05 {
            times.push(t);
            t += period;
        }
        let grid_in = v2m_core::beat::BeatGrid::from_beats(times.clone(), bpm, 10.0);
        let mut pcm = render_click(&grid_in, sr).unwrap();
        pcm.resize((10.0 * sr as f64) as usize, 0.0);
        let env = onset_envelope(&pcm, sr).unwrap();
        let cfg = BeatTrackConfig::default();
        let (tempo, grid) = track(&env, &cfg);
        for &b in &tempo.bpm {
            assert!(
                (b - bpm).abs() <= 2.0,
                "{bpm} BPM: window estimated {b}"
            );
        }
        let hits = grid
            .beat_times
            .iter()
            .filter(|&&b| times.iter().any(|&tt| (b - tt).abs() <= 0.02))
            .count();
        assert!(
            hits as f64 >= 0.9 * grid.beat_times.len() as f64,
            "{bpm} BPM: {hits}/{} within 20 ms",
            grid.beat_times.len()
        );
    }
    let dt = t0.elapsed();
    assert!(dt.as_secs() < 30, "beat oracle took {dt:?}");
    println!(
        "ACCEPTANCE 5 beat tracker oracle: PASS (60/90/120/180 BPM, {:.1}s)",
        dt.as_secs_f64()
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_matching_oracle() {
    fn brute(g: &[f64], r: &[f64], tol: f64, i: usize, used: &mut Vec<bool>) -> usize {
        if i == g.len() {
            return 0;
        }
        let mut best = brute(g, r, tol, i + 1, used);
        for j in 0..r.len() {
            if !used[j] && (g[i] - r[j]).abs() < tol {
                used[j] = true;
                best = best.max(1 + brute(g, r, tol, i + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC6);
    let sorted_times = |rng: &mut ChaCha8Rng, count: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..5.0)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        v
    };
    for _ in 0..500 {
        let ng = rng.random_range(0..=8);
        let nr = rng.random_range(1..=8);
        let g = sorted_times(&mut rng, ng);
        let r = sorted_times(&mut rng, nr);
        let tol = rng.random_range(0.05..0.6);
        let gen = BeatSet::new(g.clone()).unwrap();
        let reference = BeatSet::new(r.clone()).unwrap();
        let dp = match_beats(&gen, &reference, tol).len();
        let mut used = vec![false; r.len()];
        assert_eq!(dp, brute(&g, &r, tol, 0, &mut used), "gen {g:?} ref {r:?} tol {tol}");
    }
    for _ in 0..1000 {
        let ng = rng.random_range(0..=12);
        let nr = rng.random_range(1..=12);
        let g = sorted_times(&mut rng, ng);
        let r = sorted_times(&mut rng, nr);
        let gen = BeatSet::new(g).unwrap();
        let reference = BeatSet::new(r).unwrap();
        let hit = bhs(&gen, &reference, 0.1).unwrap();
        let cov = bcs(&gen, &reference).unwrap();
        assert!(hit <= cov + 1e-12 && hit <= 100.0 + 1e-12);
    }
    // worked example
    let reference = BeatSet::new(vec![1.0, 2.0, 3.0]).unwrap();
    let gen = BeatSet::new(vec![1.05, 2.5, 2.95]).unwrap();
    assert!((bhs(&gen, &reference, 0.1).unwrap() - 200.0 / 3.0).abs() < 1e-9);
    assert!((bcs(&gen, &reference).unwrap() - 100.0).abs() < 1e-12);
    println!("ACCEPTANCE 6 matching oracle: PASS (500 brute-force + 10^3 bound checks)");
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_ode_solver() {
    // one-step exactness on a constant field
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC7);
    let z0 = Tensor::randn(&[4, 3], &mut rng);
    let z1 = Tensor::randn(&[4, 3], &mut rng);
    let field: Vec<f64> = z1.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect();
    let f = Tensor::new(vec![4, 3], field);
    let one = euler_integrate(|_, _| f.clone(), &z0, 1);
    assert!(one.max_abs_diff(&z1) < 1e-12);

    // halving the step halves the global error for dz/dt = -z
    let start = Tensor::scalar(1.0);
    let exact = (-1f64).exp();
    let errs: Vec<f64> = [10usize, 20, 40, 80]
        .iter()
        .map(|&steps| {
            (euler_integrate(|z, _| z.map(|v| -v), &start, steps).item() - exact).abs()
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.8..=2.2).contains(&ratio), "error ratio {ratio}");
    }
    println!("ACCEPTANCE 7 ODE solver: PASS (one-step exact, first-order convergence)");
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_cfg_identities() {
    let model = VelocityModel::new(DitConfig {
        latent_channels: 3,
        model_dim: 8,
        layers: 1,
        heads: 2,
        time_embed_dim: 8,
        rope_base: 10_000.0,
        rms_eps: 1e-6,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC8);
    let params = model.init_params(&mut rng);
    let z = Tensor::randn(&[5, 3], &mut rng);
    let cond = Tensor::randn(&[5, 8], &mut rng);
    let eval = |gamma: f64| {
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let scope = Scope::root(&binding);
        let zn = g.input(z.clone());
        let cn = g.input(cond.clone());
        let vc = model.velocity(&mut g, &scope, zn, 0.3, CondInput::Cond(cn)).unwrap();
        let vn = model.velocity(&mut g, &scope, zn, 0.3, CondInput::Null).unwrap();
        let vg =
            cfg_velocity(&mut g, &model, &scope, zn, 0.3, CondInput::Cond(cn), gamma).unwrap();
        (
            g.value(vc).clone(),
            g.value(vn).clone(),
            g.value(vg).clone(),
        )
    };
    let (vc, _, v1) = eval(1.0);
    assert_eq!(v1, vc, "gamma=1 must be bit-exact conditional");
    let (_, vn, v0) = eval(0.0);
    assert_eq!(v0, vn, "gamma=0 must be bit-exact unconditional");
    let (vc4, vn4, v4) = eval(4.0);
    for i in 0..v4.numel() {
        let expect = 4.0 * vc4.data()[i] - 3.0 * vn4.data()[i];
        assert!((v4.data()[i] - expect).abs() < 1e-12);
    }
    println!("ACCEPTANCE 8 CFG identities: PASS");
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_09_icl_contract() {
    let model = VelocityModel::new(DitConfig {
        latent_channels: 3,
        model_dim: 8,
        layers: 1,
        heads: 2,
        time_embed_dim: 8,
        rope_base: 10_000.0,
        rms_eps: 1e-6,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC9);
    let params = model.init_params(&mut rng);
    let z0 = Tensor::randn(&[10, 3], &mut rng);
    let cond = Tensor::randn(&[10, 8], &mut rng);
    let prompt = Tensor::randn(&[4, 3], &mut rng);
    let out = euler_sample(
        &model,
        &params,
        Some(&cond),
        &SamplerConfig { steps: 8, guidance: 4.0 },
        &z0,
        Some(&IclContext { prompt: prompt.clone() }),
        10.0,
    )
    .unwrap();
    for t in 0..4 {
        for c in 0..3 {
            assert_eq!(out.data.at(&[t, c]), prompt.at(&[t, c]), "prompt frame {t} changed");
        }
    }

    // full-context training: loss and every gradient exactly zero
    let z1 = Tensor::randn(&[6, 3], &mut rng);
    let noise = Tensor::randn(&[6, 3], &mut rng);
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let scope = Scope::root(&binding);
    let plan = StepPlan { drop_cond: false, context_frames: 6, t: 0.5 };
    let loss = rfm_loss_graph(&mut g, &model, &scope, &z1, &noise, None, &plan).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    let grads = g.backward(loss);
    for (name, &id) in binding.iter() {
        assert!(
            grads.of(id, &g).data().iter().all(|&v| v == 0.0),
            "gradient leaked into {name}"
        );
    }

    // partial context contributes nothing: residuals on context frames do
    // not move the loss
    let mut g2 = Graph::new();
    let v = g2.input(Tensor::randn(&[6, 3], &mut rng));
    let tgt = g2.input(Tensor::randn(&[6, 3], &mut rng));
    let l_masked = v2m_core::flowgen::rfm_residual_loss(&mut g2, v, tgt, 2);
    let grads2 = g2.backward(l_masked);
    let gv = grads2.of(v, &g2);
    for t in 0..2 {
        for c in 0..3 {
            assert_eq!(gv.at(&[t, c]), 0.0, "context frame {t} received gradient");
        }
    }
    println!("ACCEPTANCE 9 ICL contract: PASS");
}

// --------------------------------------------------------------- criterion 10

struct TrendOutcome {
    sim_pos: f64,
    sim_shift: f64,
    sim_repl: f64,
    sim_silence: f64,
    bhs_pre: f64,
    sim_metric_pre: f64,
    bhs_scratch: f64,
    sim_metric_scratch: f64,
    bhs_unshifted: f64,
    bhs_shifted: f64,
}

fn trend_seed(seed: u64) -> TrendOutcome {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.optim.lr = 1e-3;
    cfg.pretrain.steps = 2000;
    cfg.pretrain.batch = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(6364136223846793005));
    let pool: Vec<SyntheticClip> = (0..24)
        .map(|i| gen_pair(&cfg.world, 6.0 + (i % 7) as f64, &mut rng).unwrap())
        .collect();
    let holdout: Vec<SyntheticClip> =
        (0..8).map(|_| gen_pair(&cfg.world, 8.0, &mut rng).unwrap()).collect();

    let (pre, _) = pretrain_pool(&cfg, &pool, false).unwrap();

    // (a) embedding gaps on held-out positives vs constructed negatives
    let (mut sim_pos, mut sim_shift, mut sim_repl, mut sim_silence) = (0.0, 0.0, 0.0, 0.0);
    for (i, clip) in holdout.iter().enumerate() {
        let frames = clip.frames();
        sim_pos += sim_metric(&pre, clip, &clip.music.data).unwrap();
        let rule = ShiftRule {
            minimal_cycle: clip.beats.minimal_cycle_frames,
            total_len: frames,
        };
        let s = rule.sample(&mut rng).unwrap();
        sim_shift += sim_metric(&pre, clip, &apply_shift(&clip.music.data, s)).unwrap();
        let donor = &holdout[(i + 1) % holdout.len()];
        let (replaced, _) = random_replacement(
            &clip.music.data,
            &donor.music.data,
            &ReplacementRule::default(),
            &mut rng,
        )
        .unwrap();
        sim_repl += sim_metric(&pre, clip, &replaced).unwrap();
        sim_silence += sim_metric(
            &pre,
            clip,
            &Tensor::zeros(&[frames, cfg.world.latent_channels]),
        )
        .unwrap();
    }
    let k = holdout.len() as f64;
    (sim_pos, sim_shift, sim_repl, sim_silence) =
        (sim_pos / k, sim_shift / k, sim_repl / k, sim_silence / k);

    // (b) fixed-budget stage 2, warm-started vs from scratch
    let mut stage2 = cfg.clone();
    stage2.optim.lr = 2e-4;
    stage2.train.steps = 600;
    stage2.train.batch = 8;
    stage2.sampler.guidance = 1.5;
    let (warm, _) = train_pool(&stage2, &pool, Some(&pre.params), false).unwrap();
    let (scratch, _) = train_pool(&stage2, &pool, None, false).unwrap();

    let eval_pipeline = |genr: &v2m_core::pipeline::GeneratorArtifacts,
                         rng: &mut ChaCha8Rng|
     -> (f64, f64, f64, f64) {
        let (mut tb, mut ts, mut n) = (0.0, 0.0, 0.0);
        let mut tb_shift_acc = 0.0;
        for (i, clip) in holdout.iter().enumerate() {
            let reference = BeatSet::new(clip.beats.beat_times.clone()).unwrap();
            for r in 0..3u64 {
                let latent =
                    sample_clip(genr, &stage2, clip, None, seed ^ (1000 + 37 * i as u64 + r))
                        .unwrap();
                let grid = latent_beats(&stage2, &latent.data);
                let gen = BeatSet::new(grid.beat_times).unwrap();
                tb += bhs(&gen, &reference, 0.1).unwrap();
                ts += sim_metric(&pre, clip, &latent.data).unwrap();
                // (c): the same output, temporally shifted by the rule
                let rule = ShiftRule {
                    minimal_cycle: clip.beats.minimal_cycle_frames,
                    total_len: clip.frames(),
                };
                let s = rule.sample(rng).unwrap();
                let shifted = apply_shift(&latent.data, s);
                let sgrid = latent_beats(&stage2, &shifted);
                let sgen = BeatSet::new(sgrid.beat_times).unwrap();
                tb_shift_acc += bhs(&sgen, &reference, 0.1).unwrap();
                n += 1.0;
            }
        }
        (tb / n, ts / n, tb / n, tb_shift_acc / n)
    };
    let (bhs_pre, sim_metric_pre, bhs_unshifted, bhs_shifted) =
        eval_pipeline(&warm, &mut rng);
    let (bhs_scratch, sim_metric_scratch, _, _) = eval_pipeline(&scratch, &mut rng);

    TrendOutcome {
        sim_pos,
        sim_shift,
        sim_repl,
        sim_silence,
        bhs_pre,
        sim_metric_pre,
        bhs_scratch,
        sim_metric_scratch,
        bhs_unshifted,
        bhs_shifted,
    }
}

#[test]
fn criterion_10_trend_reproduction() {
    let t0 = Instant::now();
    let seeds = [11u64, 12, 13];
    let outcomes: Vec<TrendOutcome> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| s.spawn(move || trend_seed(seed)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mean = |f: &dyn Fn(&TrendOutcome) -> f64| -> f64 {
        outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64
    };
    for (seed, o) in seeds.iter().zip(&outcomes) {
        println!(
            "  seed {seed}: SIM pos {:.1} shift {:.1} repl {:.1} silence {:.1} | \
             warm BHS {:.1} SIM {:.1} vs scratch BHS {:.1} SIM {:.1} | \
             shifted-output BHS {:.1}",
            o.sim_pos,
            o.sim_shift,
            o.sim_repl,
            o.sim_silence,
            o.bhs_pre,
            o.sim_metric_pre,
            o.bhs_scratch,
            o.sim_metric_scratch,
            o.bhs_shifted
        );
    }

    // (a) positives separate from both negative constructions by >= 10 pts
    let pos = mean(&|o| o.sim_pos);
    let shift = mean(&|o| o.sim_shift);
    let repl = mean(&|o| o.sim_repl);
    let silence = mean(&|o| o.sim_silence);
    assert!(
        pos - shift >= 10.0,
        "10a: positive {pos:.1} vs shift negative {shift:.1}"
    );
    assert!(
        pos - repl >= 10.0,
        "10a: positive {pos:.1} vs replacement negative {repl:.1}"
    );
    assert!(silence < pos, "10a: silence {silence:.1} not below positive {pos:.1}");

    // (b) warm-started pipeline strictly ahead on both held-out metrics
    let bhs_pre = mean(&|o| o.bhs_pre);
    let bhs_scratch = mean(&|o| o.bhs_scratch);
    let sim_pre = mean(&|o| o.sim_metric_pre);
    let sim_scratch = mean(&|o| o.sim_metric_scratch);
    assert!(
        bhs_pre > bhs_scratch,
        "10b: BHS {bhs_pre:.1} (pretrained) vs {bhs_scratch:.1} (scratch)"
    );
    assert!(
        sim_pre > sim_scratch,
        "10b: SIM {sim_pre:.1} (pretrained) vs {sim_scratch:.1} (scratch)"
    );

    // (c) shifting generated latents costs >= 10 BHS points
    let unshifted = mean(&|o| o.bhs_unshifted);
    let shifted = mean(&|o| o.bhs_shifted);
    assert!(
        unshifted - shifted >= 10.0,
        "10c: unshifted {unshifted:.1} vs shifted {shifted:.1}"
    );

    let dt = t0.elapsed();
    assert!(dt.as_secs() < 30 * 60, "trend suite took {dt:?}");
    println!(
        "ACCEPTANCE 10 trend reproduction: PASS \
         (a: {pos:.1}/{shift:.1}/{repl:.1}, b: BHS {bhs_pre:.1}>{bhs_scratch:.1} \
         SIM {sim_pre:.1}>{sim_scratch:.1}, c: {unshifted:.1}-{shifted:.1}, {:.0}s)",
        dt.as_secs_f64()
    );
}
