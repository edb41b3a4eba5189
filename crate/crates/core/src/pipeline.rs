//! End-to-end pipeline stages behind the CLI: data synthesis, contrastive
//! pre-training, generator training, sampling, beat tracking and
//! evaluation. The `*_pool` functions work on in-memory clip pools; the
//! `cmd_*` wrappers add dataset/checkpoint I/O and resolved-config dumps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adaptor::{Adaptor, AdaptorConfig, ConditionSequence, Scope};
use crate::beat::{onset_from_latent, onset_envelope, track, BeatGrid};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::contrastive::{
    build_negatives, encode_audio, loss_semantic_from_matrix, loss_temporal_from_matrices,
    sim_matrix, AudioHead, ReplacementRule,
};
use crate::dataset::{load_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::flowgen::{
    draw_step_plan, euler_sample, rfm_loss_graph, IclContext, LatentSequence, VelocityModel,
};
use crate::graph::Graph;
use crate::metrics::{bcs, bhs, sim_percent, BeatSet};
use crate::optim::AdamW;
use crate::params::Params;
use crate::synthdata::{gen_pair, sample_batch, SyntheticClip};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor, DType};

// distinct deterministic streams per stage
const SALT_SYNTH: u64 = 0x53594e54;
const SALT_PRETRAIN: u64 = 0x50524554;
const SALT_TRAIN: u64 = 0x5452414e;
const SALT_SAMPLE: u64 = 0x53414d50;

fn stage_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Contrastively pre-trained encoders: the visual adaptor and audio head
/// sharing one parameter set (`adaptor.*`, `head.*`, `log_tau`).
pub struct PretrainArtifacts {
    pub adaptor: Adaptor,
    pub head: AudioHead,
    pub params: Params,
}

/// Conditional generator: adaptor plus velocity model (`adaptor.*`, `dit.*`).
pub struct GeneratorArtifacts {
    pub adaptor: Adaptor,
    pub model: VelocityModel,
    pub params: Params,
}

fn adaptor_for(cfg: &RunConfig) -> Result<Adaptor> {
    Adaptor::new(AdaptorConfig {
        channels: cfg.world.patch_channels,
        model_dim: cfg.dit.model_dim,
        strategy: cfg.strategy,
    })
}

fn head_for(cfg: &RunConfig) -> AudioHead {
    AudioHead { in_channels: cfg.world.latent_channels, out_dim: cfg.dit.model_dim }
}

fn grads_by_name(
    binding: &crate::params::Binding,
    grads: &crate::graph::Gradients,
    g: &Graph,
) -> BTreeMap<String, Tensor> {
    binding
        .iter()
        .map(|(name, &id)| (name.clone(), grads.of(id, g)))
        .collect()
}

/// Contrastive pre-training on an in-memory pool. Returns the trained
/// encoders and the per-step loss history.
pub fn pretrain_pool(
    cfg: &RunConfig,
    pool: &[SyntheticClip],
    verbose: bool,
) -> Result<(PretrainArtifacts, Vec<f64>)> {
    let adaptor = adaptor_for(cfg)?;
    let head = head_for(cfg);
    let mut rng = stage_rng(cfg.seed, SALT_PRETRAIN);
    let mut params = Params::new();
    params.extend_prefixed("adaptor", adaptor.init_params(&mut rng));
    params.extend_prefixed("head", head.init_params(&mut rng));
    params.insert("log_tau", Tensor::scalar(cfg.pretrain.init_tau.ln()));

    let mut opt = AdamW::new(cfg.optim);
    let repl_rule = ReplacementRule::default();
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    for step in 0..cfg.pretrain.steps {
        let batch = sample_batch(pool, cfg.pretrain.batch, &mut rng)?;
        let latents: Vec<Tensor> = batch.iter().map(|b| b.clip.music.data.clone()).collect();
        let cycles: Vec<usize> =
            batch.iter().map(|b| b.clip.beats.minimal_cycle_frames).collect();
        let negs = build_negatives(&latents, &cycles, &repl_rule, &mut rng);

        let mut g = Graph::new_unchecked();
        let binding = params.bind(&mut g);
        let adaptor_scope = Scope::prefixed(&binding, "adaptor");
        let head_scope = Scope::prefixed(&binding, "head");
        let frames = batch[0].clip.frames();

        let mut video_embs = Vec::with_capacity(batch.len());
        for item in &batch {
            video_embs.push(adaptor.forward_seq(
                &mut g,
                &adaptor_scope,
                &item.clip.video,
                Some(&item.clip.cls),
                frames,
            )?);
        }
        let embed_music = |g: &mut Graph, latent: &Tensor| -> Result<crate::graph::NodeId> {
            let feat = g.input(encode_audio(latent).data);
            head.forward(g, &head_scope, feat, frames)
        };
        let mut music_embs = Vec::with_capacity(batch.len());
        let mut shift_embs = Vec::with_capacity(batch.len());
        let mut repl_embs = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            music_embs.push(embed_music(&mut g, &latents[i])?);
            shift_embs.push(embed_music(&mut g, &negs.shifted[i])?);
            repl_embs.push(embed_music(&mut g, &negs.replaced[i])?);
        }

        let s = sim_matrix(&mut g, &music_embs, &video_embs);
        let log_tau = binding.id("log_tau");
        let loss = if cfg.pretrain.temporal {
            let sh = sim_matrix(&mut g, &shift_embs, &video_embs);
            let rp = sim_matrix(&mut g, &repl_embs, &video_embs);
            loss_temporal_from_matrices(
                &mut g,
                s,
                sh,
                rp,
                log_tau,
                cfg.pretrain.symmetric_negatives,
            )?
        } else {
            loss_semantic_from_matrix(&mut g, s, log_tau)?
        };
        let loss_v = g.value(loss).item();
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!(
                "contrastive loss became non-finite at step {step}"
            )));
        }
        let grads = g.backward(loss);
        let by_name = grads_by_name(&binding, &grads, &g);
        opt.step(&mut params, &by_name);
        losses.push(loss_v);
        if verbose && (step % 50 == 0 || step + 1 == cfg.pretrain.steps) {
            eprintln!("pretrain step {step:>5}  loss {loss_v:.4}");
        }
    }
    Ok((PretrainArtifacts { adaptor, head, params }, losses))
}

/// Flow-matching training on an in-memory pool. `init_adaptor` supplies
/// pre-trained adaptor parameters (`adaptor.*` prefix); otherwise the
/// adaptor starts from random initialization. Both the adaptor and the
/// velocity model are trained.
pub fn train_pool(
    cfg: &RunConfig,
    pool: &[SyntheticClip],
    init_adaptor: Option<&Params>,
    verbose: bool,
) -> Result<(GeneratorArtifacts, Vec<f64>)> {
    let adaptor = adaptor_for(cfg)?;
    let model = VelocityModel::new(cfg.dit.clone())?;
    let mut rng = stage_rng(cfg.seed, SALT_TRAIN);
    let mut params = Params::new();
    match init_adaptor {
        Some(pre) => {
            let sub = pre.subset("adaptor");
            if sub.is_empty() {
                return Err(Error::Config(
                    "pre-trained parameters carry no adaptor entries".into(),
                ));
            }
            params.extend_prefixed("adaptor", sub);
            // keep the parameter stream aligned with the from-scratch path
            let _ = adaptor.init_params(&mut rng);
        }
        None => params.extend_prefixed("adaptor", adaptor.init_params(&mut rng)),
    }
    params.extend_prefixed("dit", model.init_params(&mut rng));

    let mut opt = AdamW::new(cfg.optim);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let cz = cfg.world.latent_channels;
    for step in 0..cfg.train.steps {
        let batch = sample_batch(pool, cfg.train.batch, &mut rng)?;
        let mut g = Graph::new_unchecked();
        let binding = params.bind(&mut g);
        let adaptor_scope = Scope::prefixed(&binding, "adaptor");
        let dit_scope = Scope::prefixed(&binding, "dit");
        let mut per_item = Vec::with_capacity(batch.len());
        for item in &batch {
            let frames = item.clip.frames();
            let cond = adaptor.forward_seq(
                &mut g,
                &adaptor_scope,
                &item.clip.video,
                Some(&item.clip.cls),
                frames,
            )?;
            let plan = draw_step_plan(&mut rng, frames, cfg.world.latent_fps, &cfg.train.randomness);
            let z0 = Tensor::randn(&[frames, cz], &mut rng);
            let loss_i = rfm_loss_graph(
                &mut g,
                &model,
                &dit_scope,
                &item.clip.music.data,
                &z0,
                Some(cond),
                &plan,
            )?;
            per_item.push(loss_i);
        }
        let stacked = g.stack_scalars(&per_item);
        let loss = g.mean_all(stacked);
        let loss_v = g.value(loss).item();
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!(
                "flow-matching loss became non-finite at step {step}"
            )));
        }
        let grads = g.backward(loss);
        let by_name = grads_by_name(&binding, &grads, &g);
        opt.step(&mut params, &by_name);
        losses.push(loss_v);
        if verbose && (step % 50 == 0 || step + 1 == cfg.train.steps) {
            eprintln!("train step {step:>5}  loss {loss_v:.4}");
        }
    }
    Ok((GeneratorArtifacts { adaptor, model, params }, losses))
}

/// Visual condition for a clip under a generator or pretrain parameter set.
pub fn condition_for_clip(
    adaptor: &Adaptor,
    params: &Params,
    clip: &SyntheticClip,
) -> Result<ConditionSequence> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let scope = Scope::prefixed(&binding, "adaptor");
    let out = adaptor.forward_seq(&mut g, &scope, &clip.video, Some(&clip.cls), clip.frames())?;
    Ok(ConditionSequence { data: g.value(out).clone(), fps: clip.music.fps })
}

/// Generate one latent for a clip with the trained generator.
pub fn sample_clip(
    genr: &GeneratorArtifacts,
    cfg: &RunConfig,
    clip: &SyntheticClip,
    prompt: Option<&Tensor>,
    seed: u64,
) -> Result<LatentSequence> {
    let cond = condition_for_clip(&genr.adaptor, &genr.params, clip)?;
    let mut rng = stage_rng(seed, SALT_SAMPLE);
    let z0 = Tensor::randn(&[clip.frames(), cfg.world.latent_channels], &mut rng);
    let dit_params = genr.params.subset("dit");
    let icl = prompt.map(|p| IclContext { prompt: p.clone() });
    euler_sample(
        &genr.model,
        &dit_params,
        Some(&cond.data),
        &cfg.sampler,
        &z0,
        icl.as_ref(),
        cfg.world.latent_fps,
    )
}

/// Embedding-similarity metric (percent) between a clip's video and a music
/// latent under pre-trained encoders.
pub fn sim_metric(
    pre: &PretrainArtifacts,
    clip: &SyntheticClip,
    music: &Tensor,
) -> Result<f64> {
    let frames = clip.frames();
    let video = condition_for_clip(&pre.adaptor, &pre.params, clip)?;
    let mut g = Graph::new();
    let binding = pre.params.bind(&mut g);
    let head_scope = Scope::prefixed(&binding, "head");
    let feat = g.input(encode_audio(music).data);
    let music_emb = pre.head.forward(&mut g, &head_scope, feat, frames)?;
    sim_percent(g.value(music_emb), &video.data)
}

/// Beats of a music latent via the latent-rate envelope and the DP tracker.
pub fn latent_beats(cfg: &RunConfig, latent: &Tensor) -> BeatGrid {
    let env = onset_from_latent(latent, cfg.world.latent_fps);
    let mut beat_cfg = cfg.beat;
    beat_cfg.latent_fps = cfg.world.latent_fps;
    track(&env, &beat_cfg).1
}

// ----- checkpoint packing ---------------------------------------------------

pub fn save_pretrain(dir: &Path, cfg: &RunConfig, art: &PretrainArtifacts) -> Result<()> {
    let meta = serde_json::json!({
        "world": cfg.world,
        "adaptor": art.adaptor.cfg,
        "head_channels": art.head.in_channels,
        "model_dim": art.head.out_dim,
    });
    save_checkpoint(dir, "pretrain", &meta, &art.params)
}

pub fn load_pretrain(dir: &Path) -> Result<PretrainArtifacts> {
    let ck = load_checkpoint(dir)?;
    expect_kind(&ck, "pretrain")?;
    let adaptor_cfg: AdaptorConfig = serde_json::from_value(ck.meta["adaptor"].clone())?;
    let head = AudioHead {
        in_channels: as_meta_usize(&ck, "head_channels")?,
        out_dim: as_meta_usize(&ck, "model_dim")?,
    };
    Ok(PretrainArtifacts { adaptor: Adaptor::new(adaptor_cfg)?, head, params: ck.params })
}

pub fn save_generator(dir: &Path, cfg: &RunConfig, art: &GeneratorArtifacts) -> Result<()> {
    let meta = serde_json::json!({
        "world": cfg.world,
        "adaptor": art.adaptor.cfg,
        "dit": art.model.cfg,
    });
    save_checkpoint(dir, "train", &meta, &art.params)
}

pub fn load_generator(dir: &Path) -> Result<GeneratorArtifacts> {
    let ck = load_checkpoint(dir)?;
    expect_kind(&ck, "train")?;
    let adaptor_cfg: AdaptorConfig = serde_json::from_value(ck.meta["adaptor"].clone())?;
    let dit_cfg: crate::flowgen::DitConfig = serde_json::from_value(ck.meta["dit"].clone())?;
    Ok(GeneratorArtifacts {
        adaptor: Adaptor::new(adaptor_cfg)?,
        model: VelocityModel::new(dit_cfg)?,
        params: ck.params,
    })
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    if ck.kind != kind {
        return Err(Error::Input(format!(
            "checkpoint kind `{}` where `{kind}` is required",
            ck.kind
        )));
    }
    Ok(())
}

fn as_meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta[key]
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::Format(format!("checkpoint meta missing `{key}`")))
}

// ----- evaluation -----------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ClipEval {
    pub id: String,
    pub run: usize,
    pub bcs: f64,
    pub bhs: f64,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_clip: Vec<ClipEval>,
    pub mean_bcs: f64,
    pub mean_bhs: f64,
    pub mean_sim: Option<f64>,
    /// Clips skipped because the reference has no beats.
    pub excluded: usize,
}

/// One generated item to score: id, run index, and its latent.
pub struct EvalItem {
    pub id: String,
    pub run: usize,
    pub latent: Tensor,
}

/// Score generated latents against reference clips. Aggregation is the
/// unweighted mean over clips within each run, then over runs; input order
/// does not matter.
pub fn evaluate_latents(
    cfg: &RunConfig,
    items: &[EvalItem],
    clips: &BTreeMap<String, SyntheticClip>,
    metric: Option<&PretrainArtifacts>,
) -> Result<EvalReport> {
    let mut rows: Vec<ClipEval> = items
        .par_iter()
        .map(|item| -> Result<Option<ClipEval>> {
            let clip = clips.get(&item.id).ok_or_else(|| {
                Error::Input(format!("no reference clip for id `{}`", item.id))
            })?;
            if clip.beats.beat_times.is_empty() {
                return Ok(None);
            }
            let reference = BeatSet::new(clip.beats.beat_times.clone())?;
            let gen_grid = latent_beats(cfg, &item.latent);
            let gen = BeatSet::new(gen_grid.beat_times)?;
            let coverage = bcs(&gen, &reference)?;
            let hit = bhs(&gen, &reference, cfg.eval.tolerance_s)?;
            let sim = match metric {
                Some(m) => Some(sim_metric(m, clip, &item.latent)?),
                None => None,
            };
            Ok(Some(ClipEval { id: item.id.clone(), run: item.run, bcs: coverage, bhs: hit, sim }))
        })
        .collect::<Result<Vec<Option<ClipEval>>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| (&a.id, a.run).cmp(&(&b.id, b.run)));
    let excluded = items.len() - rows.len();

    // mean over clips within each run, then over runs
    let mut runs: BTreeMap<usize, Vec<&ClipEval>> = BTreeMap::new();
    for row in &rows {
        runs.entry(row.run).or_default().push(row);
    }
    let mut run_means: Vec<(f64, f64, Option<f64>)> = Vec::new();
    for (_, rs) in &runs {
        let n = rs.len() as f64;
        let mb = rs.iter().map(|r| r.bcs).sum::<f64>() / n;
        let mh = rs.iter().map(|r| r.bhs).sum::<f64>() / n;
        let sims: Vec<f64> = rs.iter().filter_map(|r| r.sim).collect();
        let ms = if sims.is_empty() {
            None
        } else {
            Some(sims.iter().sum::<f64>() / sims.len() as f64)
        };
        run_means.push((mb, mh, ms));
    }
    if run_means.is_empty() {
        return Err(Error::MetricUndefined(
            "no clip produced a defined metric (empty references?)".into(),
        ));
    }
    let k = run_means.len() as f64;
    let mean_bcs = run_means.iter().map(|r| r.0).sum::<f64>() / k;
    let mean_bhs = run_means.iter().map(|r| r.1).sum::<f64>() / k;
    let sim_vals: Vec<f64> = run_means.iter().filter_map(|r| r.2).collect();
    let mean_sim = if sim_vals.is_empty() {
        None
    } else {
        Some(sim_vals.iter().sum::<f64>() / sim_vals.len() as f64)
    };
    Ok(EvalReport { per_clip: rows, mean_bcs, mean_bhs, mean_sim, excluded })
}

// ----- command wrappers -------------------------------------------------------

/// `synth`: generate a dataset directory of paired clips.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.world.validate()?;
    if cfg.synth.min_duration_s < crate::synthdata::MIN_CLIP_S
        || cfg.synth.max_duration_s > crate::synthdata::MAX_CLIP_S
        || cfg.synth.min_duration_s > cfg.synth.max_duration_s
    {
        return Err(Error::Config(format!(
            "duration range [{}, {}] outside [{}, {}]",
            cfg.synth.min_duration_s,
            cfg.synth.max_duration_s,
            crate::synthdata::MIN_CLIP_S,
            crate::synthdata::MAX_CLIP_S
        )));
    }
    let mut master = stage_rng(cfg.seed, SALT_SYNTH);
    let specs: Vec<(String, u64, f64)> = (0..cfg.synth.clips)
        .map(|i| {
            let seed = master.random::<u64>();
            let dur = master.random_range(cfg.synth.min_duration_s..=cfg.synth.max_duration_s);
            (format!("clip_{i:04}"), seed, dur)
        })
        .collect();
    let clips: Vec<(String, u64, SyntheticClip)> = specs
        .par_iter()
        .map(|(id, seed, dur)| {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((id.clone(), *seed, gen_pair(&cfg.world, *dur, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(out, &cfg.world, cfg.seed, &clips)?;
    cfg.write_resolved(out)?;
    Ok(())
}

/// `pretrain`: contrastive stage on a dataset directory.
pub fn cmd_pretrain(cfg: &RunConfig, dataset: &Path, out: &Path, verbose: bool) -> Result<()> {
    let (_, pool) = load_dataset(dataset)?;
    let (art, _) = pretrain_pool(cfg, &pool, verbose)?;
    save_pretrain(out, cfg, &art)?;
    cfg.write_resolved(out)?;
    Ok(())
}

/// `train`: flow-matching stage, warm-starting the adaptor from a pretrain
/// checkpoint unless `from_scratch`.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    pretrain_ckpt: Option<&Path>,
    out: &Path,
    verbose: bool,
) -> Result<()> {
    let (_, pool) = load_dataset(dataset)?;
    let init = match pretrain_ckpt {
        Some(p) => Some(load_pretrain(p)?.params),
        None => None,
    };
    let (art, _) = train_pool(cfg, &pool, init.as_ref(), verbose)?;
    save_generator(out, cfg, &art)?;
    cfg.write_resolved(out)?;
    Ok(())
}

/// `sample`: generate latents for the given clip ids (or all).
pub fn cmd_sample(
    cfg: &RunConfig,
    model_dir: &Path,
    dataset: &Path,
    ids: Option<&[String]>,
    runs: usize,
    prompt_file: Option<&Path>,
    out: &Path,
) -> Result<()> {
    cfg.sampler.validate()?;
    let genr = load_generator(model_dir)?;
    let (manifest, pool) = load_dataset(dataset)?;
    let prompt = match prompt_file {
        Some(p) => Some(read_tensor(p)?),
        None => None,
    };
    std::fs::create_dir_all(out)?;
    let selected: Vec<(String, &SyntheticClip)> = manifest
        .clips
        .iter()
        .zip(&pool)
        .filter(|(rec, _)| ids.is_none_or(|ids| ids.contains(&rec.id)))
        .map(|(rec, clip)| (rec.id.clone(), clip))
        .collect();
    if selected.is_empty() {
        return Err(Error::Input("no clips selected for sampling".into()));
    }
    // derive per-(clip, run) seeds up front so work can parallelize
    let mut master = stage_rng(cfg.seed, SALT_SAMPLE);
    let jobs: Vec<(usize, usize, u64)> = (0..selected.len())
        .flat_map(|ci| (0..runs).map(move |r| (ci, r)))
        .map(|(ci, r)| (ci, r, master.random::<u64>()))
        .collect();
    let outputs: Vec<(String, usize, LatentSequence)> = jobs
        .par_iter()
        .map(|&(ci, r, seed)| {
            let (id, clip) = &selected[ci];
            let latent = sample_clip(&genr, cfg, clip, prompt.as_ref(), seed)?;
            Ok((id.clone(), r, latent))
        })
        .collect::<Result<Vec<_>>>()?;
    for (id, r, latent) in &outputs {
        write_tensor(&out.join(format!("{id}.run{r}.gen.mvt")), &latent.data, DType::F32)?;
    }
    cfg.write_resolved(out)?;
    Ok(())
}

/// `beat-track`: WAV in, beat JSON out.
pub fn cmd_beat_track(cfg: &RunConfig, wav: &Path, out_json: &Path) -> Result<()> {
    let (pcm, sr) = crate::wav::read_wav_mono16(wav)?;
    let env = onset_envelope(&pcm, sr)?;
    let mut beat_cfg = cfg.beat;
    beat_cfg.latent_fps = cfg.world.latent_fps;
    let (tempo, grid) = track(&env, &beat_cfg);
    let report = serde_json::json!({
        "tempo_curve": tempo
            .times_s
            .iter()
            .zip(&tempo.bpm)
            .map(|(&t, &b)| serde_json::json!({"time_s": t, "bpm": b}))
            .collect::<Vec<_>>(),
        "beats_s": grid.beat_times,
        "minimal_cycle_frames": grid.minimal_cycle_frames,
    });
    if let Some(parent) = out_json.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    std::fs::write(out_json, bytes)?;
    Ok(())
}

/// `eval`: score a directory of generated latents (`<id>.run<k>.gen.mvt`,
/// or `.wav` for beat-only scoring) against a dataset's references.
pub fn cmd_eval(
    cfg: &RunConfig,
    gen_dir: &Path,
    dataset: &Path,
    metric_ckpt: Option<&Path>,
    out: &Path,
) -> Result<EvalReport> {
    let (manifest, pool) = load_dataset(dataset)?;
    let clips: BTreeMap<String, SyntheticClip> = manifest
        .clips
        .iter()
        .map(|r| r.id.clone())
        .zip(pool)
        .collect();
    let metric = match metric_ckpt {
        Some(p) => Some(load_pretrain(p)?),
        None => None,
    };
    let mut latent_items = Vec::new();
    let mut wav_rows: Vec<ClipEval> = Vec::new();
    let mut wav_excluded = 0usize;
    let mut entries: Vec<_> = std::fs::read_dir(gen_dir)
        .map_err(|e| Error::Input(format!("{}: {e}", gen_dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((id, run)) = parse_gen_name(&name, ".gen.mvt") {
            latent_items.push(EvalItem { id, run, latent: read_tensor(&entry.path())? });
        } else if let Some((id, run)) = parse_gen_name(&name, ".gen.wav") {
            // WAV route: beats via the PCM front end; no latent exists, so
            // the embedding metric is left empty for these rows
            let (pcm, sr) = crate::wav::read_wav_mono16(&entry.path())?;
            let env = onset_envelope(&pcm, sr)?;
            let mut beat_cfg = cfg.beat;
            beat_cfg.latent_fps = cfg.world.latent_fps;
            let (_, grid) = track(&env, &beat_cfg);
            let clip = clips.get(&id).ok_or_else(|| {
                Error::Input(format!("no reference clip for id `{id}`"))
            })?;
            if clip.beats.beat_times.is_empty() {
                wav_excluded += 1;
                continue;
            }
            let reference = BeatSet::new(clip.beats.beat_times.clone())?;
            let gen = BeatSet::new(grid.beat_times)?;
            wav_rows.push(ClipEval {
                id,
                run,
                bcs: bcs(&gen, &reference)?,
                bhs: bhs(&gen, &reference, cfg.eval.tolerance_s)?,
                sim: None,
            });
        }
    }
    if latent_items.is_empty() && wav_rows.is_empty() {
        return Err(Error::Input(format!(
            "no `*.gen.mvt` or `*.gen.wav` files in {}",
            gen_dir.display()
        )));
    }
    let mut report = if latent_items.is_empty() {
        EvalReport {
            per_clip: Vec::new(),
            mean_bcs: 0.0,
            mean_bhs: 0.0,
            mean_sim: None,
            excluded: 0,
        }
    } else {
        evaluate_latents(cfg, &latent_items, &clips, metric.as_ref())?
    };
    report.excluded += wav_excluded;
    if !wav_rows.is_empty() {
        report.per_clip.extend(wav_rows);
        report.per_clip.sort_by(|a, b| (&a.id, a.run).cmp(&(&b.id, b.run)));
        let n = report.per_clip.len() as f64;
        report.mean_bcs = report.per_clip.iter().map(|r| r.bcs).sum::<f64>() / n;
        report.mean_bhs = report.per_clip.iter().map(|r| r.bhs).sum::<f64>() / n;
    }
    write_report(out, &report)?;
    cfg.write_resolved(out)?;
    Ok(report)
}

fn parse_gen_name(name: &str, suffix: &str) -> Option<(String, usize)> {
    let stem = name.strip_suffix(suffix)?;
    let (id, run) = stem.rsplit_once(".run")?;
    Some((id.to_string(), run.parse().ok()?))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    std::fs::write(out.join("report.json"), bytes)?;
    let mut csv = String::from("id,run,bcs,bhs,sim\n");
    for row in &report.per_clip {
        let sim = row.sim.map_or(String::new(), |s| format!("{s}"));
        csv.push_str(&format!("{},{},{},{},{}\n", row.id, row.run, row.bcs, row.bhs, sim));
    }
    std::fs::write(out.join("report.csv"), csv)?;
    Ok(())
}
