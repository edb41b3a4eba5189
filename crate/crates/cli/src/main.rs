//! `v2m`: synthesize paired video/music data, pre-train the encoders
//! contrastively, train the flow-matching generator, sample music latents,
//! track beats, and evaluate synchronization.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing/invalid input,
//! 4 numeric failure, 1 anything else. Failures print a one-line JSON
//! object to stderr: `{"error":{"kind":...,"message":...}}`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use v2m_core::config::RunConfig;
use v2m_core::error::Error;
use v2m_core::pipeline;

#[derive(Parser)]
#[command(name = "v2m", version, about = "Video-conditioned music latent pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Master seed for the whole run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat JSON config file with dotted keys; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Individual config overrides, `key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for synthesis/evaluation (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        /// Number of clips.
        #[arg(long)]
        clips: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training of the adaptor and audio head.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Aggregation strategy (softmax|sigmoid|attention|average|cls).
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow-matching training of the generator (stage 2).
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Pre-trained encoder checkpoint to warm-start the adaptor.
        #[arg(long, conflicts_with = "from_scratch")]
        pretrain: Option<PathBuf>,
        /// Train the adaptor and generator from random initialization.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample music latents for dataset clips.
    Sample {
        /// Trained generator checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated clip ids (default: all).
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<String>>,
        /// Inference repetitions per clip.
        #[arg(long)]
        runs: Option<usize>,
        /// ODE solver steps.
        #[arg(long)]
        ode_steps: Option<usize>,
        /// Classifier-free guidance scale.
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Latent file with a clean music prompt for in-context generation.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track beats of a 16-bit PCM mono WAV file.
    BeatTrack {
        /// Input WAV.
        #[arg(long)]
        input: PathBuf,
        /// Output JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated latents against a dataset's references.
    Eval {
        /// Directory of `<id>.run<k>.gen.mvt` (or `.gen.wav`) files.
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Pre-trained encoder checkpoint for the embedding metric.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_set(s: &str) -> Result<(String, Value), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set needs key=value, got `{s}`")))?;
    // try JSON first (numbers, booleans), else treat as a string
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::from(v));
    Ok((k.to_string(), value))
}

fn build_config(global: &GlobalArgs, extra: &BTreeMap<String, Value>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &global.config {
        cfg.load_file(path)?;
    }
    let mut flags = BTreeMap::new();
    for s in &global.sets {
        let (k, v) = parse_set(s)?;
        flags.insert(k, v);
    }
    // explicit flags win over --set, which wins over the file
    cfg.apply(&flags)?;
    cfg.apply(extra)?;
    if let Some(seed) = global.seed {
        cfg.set("seed", &Value::from(seed))?;
    }
    if let Some(threads) = global.threads {
        cfg.set("threads", &Value::from(threads))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut extra = BTreeMap::new();
    match &cli.command {
        Command::Synth { clips, .. } => {
            if let Some(c) = clips {
                extra.insert("synth.clips".into(), Value::from(*c));
            }
        }
        Command::Pretrain { steps, batch, strategy, .. } => {
            if let Some(v) = steps {
                extra.insert("pretrain.steps".into(), Value::from(*v));
            }
            if let Some(v) = batch {
                extra.insert("pretrain.batch".into(), Value::from(*v));
            }
            if let Some(v) = strategy {
                extra.insert("adaptor.strategy".into(), Value::from(v.clone()));
            }
        }
        Command::Train { steps, batch, .. } => {
            if let Some(v) = steps {
                extra.insert("train.steps".into(), Value::from(*v));
            }
            if let Some(v) = batch {
                extra.insert("train.batch".into(), Value::from(*v));
            }
        }
        Command::Sample { runs, ode_steps, cfg_scale, .. } => {
            if let Some(v) = runs {
                extra.insert("eval.runs".into(), Value::from(*v));
            }
            if let Some(v) = ode_steps {
                extra.insert("sample.ode_steps".into(), Value::from(*v));
            }
            if let Some(v) = cfg_scale {
                extra.insert("sample.cfg_scale".into(), Value::from(*v));
            }
        }
        Command::BeatTrack { .. } | Command::Eval { .. } => {}
    }
    let cfg = build_config(&cli.global, &extra)?;
    if cfg.threads > 0 {
        // ignore failure when a pool already exists (tests, repeat calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }

    match cli.command {
        Command::Synth { out, .. } => pipeline::cmd_synth(&cfg, &out),
        Command::Pretrain { dataset, out, .. } => {
            pipeline::cmd_pretrain(&cfg, &dataset, &out, true)
        }
        Command::Train { dataset, pretrain, from_scratch, out, .. } => {
            if pretrain.is_none() && !from_scratch {
                return Err(Error::Config(
                    "train needs --pretrain <ckpt> or --from-scratch".into(),
                ));
            }
            pipeline::cmd_train(&cfg, &dataset, pretrain.as_deref(), &out, true)
        }
        Command::Sample { model, dataset, ids, prompt, out, .. } => pipeline::cmd_sample(
            &cfg,
            &model,
            &dataset,
            ids.as_deref(),
            cfg.eval.runs,
            prompt.as_deref(),
            &out,
        ),
        Command::BeatTrack { input, out } => pipeline::cmd_beat_track(&cfg, &input, &out),
        Command::Eval { gen, dataset, ckpt, out } => {
            let report = pipeline::cmd_eval(&cfg, &gen, &dataset, ckpt.as_deref(), &out)?;
            let sim = report
                .mean_sim
                .map_or("-".to_string(), |s| format!("{s:.2}"));
            println!(
                "BCS {:.2}  BHS {:.2}  SIM {sim}  ({} rows, {} excluded)",
                report.mean_bcs,
                report.mean_bhs,
                report.per_clip.len(),
                report.excluded
            );
            Ok(())
        }
    }
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Input(_) | Error::Io(_) | Error::Format(_) => ("input", 3),
        Error::Numeric(_) => ("numeric", 4),
        Error::Dimension(_) => ("dimension", 4),
        Error::Infeasible(_) => ("infeasible", 1),
        Error::MetricUndefined(_) => ("metric-undefined", 1),
        Error::Json(_) => ("format", 3),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let msg = serde_json::json!({"error": {"kind": kind, "message": e.to_string()}});
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
