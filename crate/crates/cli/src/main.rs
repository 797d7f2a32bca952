//! Command-line front end: dataset synthesis, graph dumps, training,
//! evaluation and gradient checking.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use thgcl::checkpoint::Checkpoint;
use thgcl::gradcheck::{end_to_end, EndToEndSpec};
use thgcl::graph::{build_graph, TemporalMode};
use thgcl::manifest::{infer_num_classes, load_manifest};
use thgcl::seeding::clip_rng;
use thgcl::synth::{describe, generate, SynthSpec};
use thgcl::train::{evaluate, train_observed, LossMode, TrainConfig};

#[derive(Parser)]
#[command(name = "thgcl", version, about = "Temporal heterogeneous graph contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Summarise a manifest.
    Describe {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Dump one clip's graph as text.
    BuildGraph(BuildGraphArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Print `key=value` lines instead of the readable report.
        #[arg(long)]
        summary: bool,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fail when any parameter group exceeds this relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    clips_train: Option<usize>,
    #[arg(long)]
    clips_eval: Option<usize>,
    #[arg(long)]
    clip_ms: Option<u32>,
    #[arg(long)]
    audio_seg_ms: Option<u32>,
    #[arg(long)]
    video_seg_ms: Option<u32>,
    #[arg(long)]
    audio_dim: Option<usize>,
    #[arg(long)]
    video_dim: Option<usize>,
    #[arg(long)]
    labels_min: Option<usize>,
    #[arg(long)]
    labels_max: Option<usize>,
    /// Sets both noise levels.
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    noise_sigma_audio: Option<f64>,
    #[arg(long)]
    noise_sigma_video: Option<f64>,
    #[arg(long)]
    lag_ms: Option<u32>,
    #[arg(long)]
    event_len_ms: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        let mut s = SynthSpec::default();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(
            num_classes, clips_train, clips_eval, clip_ms, audio_seg_ms, video_seg_ms, audio_dim,
            video_dim, labels_min, labels_max, lag_ms, event_len_ms, seed
        );
        if let Some(v) = self.noise_sigma {
            s.noise_sigma_audio = v;
            s.noise_sigma_video = v;
        }
        set!(noise_sigma_audio, noise_sigma_video);
        s
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossModeArg {
    FlCl,
    FlOnly,
    CeOnly,
}

impl From<LossModeArg> for LossMode {
    fn from(v: LossModeArg) -> Self {
        match v {
            LossModeArg::FlCl => LossMode::FlCl,
            LossModeArg::FlOnly => LossMode::FlOnly,
            LossModeArg::CeOnly => LossMode::CeOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TemporalModeArg {
    GauHaw,
    BothHaw,
    BothGau,
}

impl From<TemporalModeArg> for TemporalMode {
    fn from(v: TemporalModeArg) -> Self {
        match v {
            TemporalModeArg::GauHaw => TemporalMode::GauHaw,
            TemporalModeArg::BothHaw => TemporalMode::BothHaw,
            TemporalModeArg::BothGau => TemporalMode::BothGau,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    loss_mode: Option<LossModeArg>,
    #[arg(long, value_enum)]
    temporal_mode: Option<TemporalModeArg>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Suppress per-event output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    clip_id: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    temporal_mode: Option<TemporalModeArg>,
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.loss_mode {
        cfg.loss_mode = m.into();
    }
    if let Some(m) = args.temporal_mode {
        cfg.temporal_mode = m.into();
    }
    if let Some(n) = args.max_iterations {
        cfg.max_iterations = n;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stdout = std::io::stdout();
    let quiet = args.quiet;
    let outcome = train_observed(&args.manifest, &cfg, &mut |e| {
        if !quiet {
            let _ = writeln!(stdout.lock(), "{}", e.to_line());
        }
    })?;
    let ckpt = args.out.join("best.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    outcome.log.write_to_dir(&args.out)?;
    fs::write(args.out.join("config.toml"), outcome.checkpoint.train.to_toml_string()?)?;
    println!(
        "checkpoint {} iterations {} best_map {}",
        ckpt.display(),
        outcome.iterations_run,
        outcome.best_map.map_or("none".to_string(), |m| m.to_string())
    );
    Ok(())
}

fn run_build_graph(args: &BuildGraphArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.temporal_mode {
        cfg.temporal_mode = m.into();
    }
    let records = load_manifest(&args.manifest, infer_num_classes(&args.manifest)?)?;
    let Some(rec) = records.iter().find(|r| r.clip_id == args.clip_id) else {
        bail!("clip {} not found in {}", args.clip_id, args.manifest.display());
    };
    let clip = rec.load()?;
    let graph_cfg = cfg.graph_config();
    let graph = build_graph(
        &clip.audio,
        &clip.video,
        &graph_cfg,
        &mut clip_rng(cfg.xi_seed(), &rec.clip_id),
    )?;
    print!("{}", graph.to_text(cfg.temporal_mode));
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => {
            let spec = args.spec();
            let out = generate(&spec, &args.out)?;
            println!("train {}", out.train_manifest.display());
            println!("eval {}", out.eval_manifest.display());
            println!("events {}", out.events.display());
        }
        Command::Describe { manifest } => print!("{}", describe(&manifest)?.to_text()),
        Command::BuildGraph(args) => run_build_graph(&args)?,
        Command::Train(args) => run_train(&args)?,
        Command::Eval {
            checkpoint,
            manifest,
            summary,
        } => {
            let ck = Checkpoint::load(&checkpoint, None)?;
            let report = evaluate(&ck, &manifest)?;
            if summary {
                print!("{}", report.to_summary());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Gradcheck { seed, tolerance } => {
            let spec = EndToEndSpec {
                seed,
                ..EndToEndSpec::default()
            };
            let groups = end_to_end(&spec)?;
            let mut worst = 0.0f64;
            for g in &groups {
                println!("{} ({} values) max_rel_error {:.3e}", g.name, g.len, g.max_relative_error);
                worst = if g.max_relative_error.is_nan() { f64::NAN } else { worst.max(g.max_relative_error) };
            }
            println!("max_rel_error {worst:.3e}");
            if !(worst < tolerance) {
                bail!("gradient check failed: {worst:e} >= {tolerance:e}");
            }
        }
    }
    Ok(())
}
