//! Run configuration with flat dotted-key JSON overrides.
//!
//! Files hold a single flat JSON object, e.g.
//! `{"adaptor.strategy": "softmax", "optim.lr": 5e-5}`. Precedence:
//! defaults < config file < command-line flags. Every run writes its
//! fully-resolved configuration next to its outputs as
//! `config.resolved.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptor::AggregationStrategy;
use crate::beat::BeatTrackConfig;
use crate::error::{Error, Result};
use crate::flowgen::{DitConfig, SamplerConfig, TrainRandomness};
use crate::optim::AdamWConfig;
use crate::synthdata::WorldConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clips: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { clips: 32, min_duration_s: 6.0, max_duration_s: 24.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Use the temporally-augmented objective (vs the plain semantic one).
    pub temporal: bool,
    /// Also augment the music-anchored denominator with each pair's own
    /// negatives.
    pub symmetric_negatives: bool,
    pub init_tau: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 16,
            temporal: true,
            symmetric_negatives: false,
            init_tau: 0.07,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStageConfig {
    pub steps: usize,
    pub batch: usize,
    pub randomness: TrainRandomness,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        TrainStageConfig { steps: 1000, batch: 8, randomness: TrainRandomness::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tolerance_s: f64,
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tolerance_s: 0.1, runs: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for synthesis and evaluation; 0 = all cores.
    pub threads: usize,
    pub world: WorldConfig,
    pub strategy: AggregationStrategy,
    pub dit: DitConfig,
    pub optim: AdamWConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainStageConfig,
    pub sampler: SamplerConfig,
    pub beat: BeatTrackConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            world: WorldConfig::default(),
            strategy: AggregationStrategy::SoftmaxGated,
            dit: DitConfig::default(),
            optim: AdamWConfig::default(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainStageConfig::default(),
            sampler: SamplerConfig::default(),
            beat: BeatTrackConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("`{key}` must be a number, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("`{key}` must be a non-negative integer, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("`{key}` must be a boolean, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("`{key}` must be a string, got {v}")))
}

impl RunConfig {
    /// Apply one dotted-key override.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "threads" => self.threads = as_usize(key, v)?,
            "world.latent_fps" => self.world.latent_fps = as_f64(key, v)?,
            "world.latent_channels" => self.world.latent_channels = as_usize(key, v)?,
            "world.grid_h" => self.world.grid_h = as_usize(key, v)?,
            "world.grid_w" => self.world.grid_w = as_usize(key, v)?,
            "world.patch_channels" => self.world.patch_channels = as_usize(key, v)?,
            "world.beat_period_min" => self.world.beat_period_frames.0 = as_usize(key, v)?,
            "world.beat_period_max" => self.world.beat_period_frames.1 = as_usize(key, v)?,
            "world.event_rate" => self.world.event_rate = as_f64(key, v)?,
            "world.noise_sigma" => self.world.noise_sigma = as_f64(key, v)?,
            "world.beat_patch_fraction" => self.world.beat_patch_fraction = as_f64(key, v)?,
            "world.beat_flash_amp" => self.world.beat_flash_amp = as_f64(key, v)?,
            "adaptor.strategy" => self.strategy = AggregationStrategy::parse(as_str(key, v)?)?,
            "model.dim" => self.dit.model_dim = as_usize(key, v)?,
            "model.layers" => self.dit.layers = as_usize(key, v)?,
            "model.heads" => self.dit.heads = as_usize(key, v)?,
            "model.time_embed_dim" => self.dit.time_embed_dim = as_usize(key, v)?,
            "optim.lr" => self.optim.lr = as_f64(key, v)?,
            "optim.beta1" => self.optim.beta1 = as_f64(key, v)?,
            "optim.beta2" => self.optim.beta2 = as_f64(key, v)?,
            "optim.eps" => self.optim.eps = as_f64(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = as_f64(key, v)?,
            "synth.clips" => self.synth.clips = as_usize(key, v)?,
            "synth.min_duration_s" => self.synth.min_duration_s = as_f64(key, v)?,
            "synth.max_duration_s" => self.synth.max_duration_s = as_f64(key, v)?,
            "pretrain.steps" => self.pretrain.steps = as_usize(key, v)?,
            "pretrain.batch" => self.pretrain.batch = as_usize(key, v)?,
            "pretrain.temporal" => self.pretrain.temporal = as_bool(key, v)?,
            "pretrain.symmetric_negatives" => {
                self.pretrain.symmetric_negatives = as_bool(key, v)?
            }
            "pretrain.init_tau" => self.pretrain.init_tau = as_f64(key, v)?,
            "train.steps" => self.train.steps = as_usize(key, v)?,
            "train.batch" => self.train.batch = as_usize(key, v)?,
            "train.cond_drop_prob" => self.train.randomness.cond_drop_prob = as_f64(key, v)?,
            "train.icl_prob" => self.train.randomness.icl_prob = as_f64(key, v)?,
            "sample.ode_steps" => self.sampler.steps = as_usize(key, v)?,
            "sample.cfg_scale" => self.sampler.guidance = as_f64(key, v)?,
            "beat.lambda" => self.beat.lambda = as_f64(key, v)?,
            "beat.window_s" => self.beat.window_s = as_f64(key, v)?,
            "beat.stride_frames" => self.beat.stride_frames = as_usize(key, v)?,
            "beat.bpm_min" => self.beat.bpm_min = as_f64(key, v)?,
            "beat.bpm_max" => self.beat.bpm_max = as_f64(key, v)?,
            "eval.tolerance_s" => self.eval.tolerance_s = as_f64(key, v)?,
            "eval.runs" => self.eval.runs = as_usize(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply a flat map of overrides in sorted key order.
    pub fn apply(&mut self, overrides: &BTreeMap<String, Value>) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let data = std::fs::read(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let map: BTreeMap<String, Value> = serde_json::from_slice(&data)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply(&map)
    }

    /// Flat dotted-key view of the fully-resolved configuration.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.into());
        put("threads", self.threads.into());
        put("world.latent_fps", self.world.latent_fps.into());
        put("world.latent_channels", self.world.latent_channels.into());
        put("world.grid_h", self.world.grid_h.into());
        put("world.grid_w", self.world.grid_w.into());
        put("world.patch_channels", self.world.patch_channels.into());
        put("world.beat_period_min", self.world.beat_period_frames.0.into());
        put("world.beat_period_max", self.world.beat_period_frames.1.into());
        put("world.event_rate", self.world.event_rate.into());
        put("world.noise_sigma", self.world.noise_sigma.into());
        put("world.beat_patch_fraction", self.world.beat_patch_fraction.into());
        put("world.beat_flash_amp", self.world.beat_flash_amp.into());
        put(
            "adaptor.strategy",
            serde_json::to_value(self.strategy).expect("strategy serializes"),
        );
        put("model.dim", self.dit.model_dim.into());
        put("model.layers", self.dit.layers.into());
        put("model.heads", self.dit.heads.into());
        put("model.time_embed_dim", self.dit.time_embed_dim.into());
        put("optim.lr", self.optim.lr.into());
        put("optim.beta1", self.optim.beta1.into());
        put("optim.beta2", self.optim.beta2.into());
        put("optim.eps", self.optim.eps.into());
        put("optim.weight_decay", self.optim.weight_decay.into());
        put("synth.clips", self.synth.clips.into());
        put("synth.min_duration_s", self.synth.min_duration_s.into());
        put("synth.max_duration_s", self.synth.max_duration_s.into());
        put("pretrain.steps", self.pretrain.steps.into());
        put("pretrain.batch", self.pretrain.batch.into());
        put("pretrain.temporal", self.pretrain.temporal.into());
        put("pretrain.symmetric_negatives", self.pretrain.symmetric_negatives.into());
        put("pretrain.init_tau", self.pretrain.init_tau.into());
        put("train.steps", self.train.steps.into());
        put("train.batch", self.train.batch.into());
        put("train.cond_drop_prob", self.train.randomness.cond_drop_prob.into());
        put("train.icl_prob", self.train.randomness.icl_prob.into());
        put("sample.ode_steps", self.sampler.steps.into());
        put("sample.cfg_scale", self.sampler.guidance.into());
        put("beat.lambda", self.beat.lambda.into());
        put("beat.window_s", self.beat.window_s.into());
        put("beat.stride_frames", self.beat.stride_frames.into());
        put("beat.bpm_min", self.beat.bpm_min.into());
        put("beat.bpm_max", self.beat.bpm_max.into());
        put("eval.tolerance_s", self.eval.tolerance_s.into());
        put("eval.runs", self.eval.runs.into());
        m
    }

    /// Write `config.resolved.json` into an output directory.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut bytes = serde_json::to_vec_pretty(&self.to_flat())?;
        bytes.push(b'\n');
        std::fs::write(out_dir.join("config.resolved.json"), bytes)?;
        Ok(())
    }
}
