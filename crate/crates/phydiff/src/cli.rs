//! `phydiff` command line: precompute, train, generate, eval, dry-run.

use std::ffi::OsString;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use phydiff_core::config::{Config, Preset};
use phydiff_core::data::{stream_samples, ToyVae, TrainingSample};
use phydiff_core::diffusion::NoiseSchedule;
use phydiff_core::generator::FreezePolicy;
use phydiff_core::inference::{generate, GenerationRequest, Guidance};
use phydiff_core::metrics::{MetricSelection, Plugins};
use phydiff_core::train::{Objective, TrainOptions};

use crate::checkpoint::load_checkpoint;
use crate::dry_run::dry_run;
use crate::error::{Error, Result};
use crate::eval::{eval_ab, eval_corpus, write_report};
use crate::io::ensure_dir;
use crate::shard::{read_shard, write_shard};
use crate::training::run_training;
use crate::video::{write_video, Video};

pub const SHARD_FILE: &str = "samples.pvgc";

#[derive(Debug, Parser)]
#[command(name = "phydiff", version, about = "Physics-conditioned latent video diffusion at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Built-in configuration: toy or paper.
    #[arg(long, global = true, default_value = "toy")]
    pub preset: String,
    /// JSON config overriding the preset (its own `preset` key wins).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization / sampling; defaults to the config's train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize, encode and cache training samples into one shard.
    Precompute {
        /// Half-open seed range `a..b`.
        #[arg(long, value_parser = parse_range)]
        seeds: Range<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training; writes losses.jsonl and checkpoints under --out.
    Train {
        /// Total optimizer steps (absolute, also when resuming).
        #[arg(long, allow_hyphen_values = true)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Shard from `precompute`; without it, clips are synthesized in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic clip count when --data is absent.
        #[arg(long, default_value_t = 64)]
        clips: u64,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// paper | physics-only | all-trainable
        #[arg(long, default_value = "paper")]
        freeze: String,
        /// Stop the diffusion loss from reaching the predictor.
        #[arg(long)]
        detach_physics: bool,
    },
    /// Sample one video from a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// Reverse steps; defaults to the full schedule.
        #[arg(long, allow_hyphen_values = true)]
        steps: Option<usize>,
        /// on | off
        #[arg(long, default_value = "on")]
        physics: String,
        /// Output directory of PPM frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporal-consistency metrics over a directory of videos, or an on/off A/B run.
    Eval {
        /// Directory of video directories (or one video directory).
        #[arg(long, conflicts_with = "checkpoint")]
        videos: Option<PathBuf>,
        #[arg(long, default_value = "flow,embed,tlpips")]
        metrics: String,
        #[arg(long)]
        report: PathBuf,
        /// A/B mode: generate physics-on and physics-off pairs from this checkpoint.
        #[arg(long, requires = "prompt")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// A/B seed range `a..b`.
        #[arg(long, value_parser = parse_range, default_value = "0..4")]
        ab_seeds: Range<u64>,
        #[arg(long, allow_hyphen_values = true)]
        steps: Option<usize>,
    },
    /// One untrained denoising step with shape and finiteness checks.
    DryRun {
        #[arg(long)]
        prompt: String,
        /// Optional JSON diagnostics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> std::result::Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("`{s}` is not a range like 0..64"))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in `{s}`"))?;
    if b < a {
        return Err(format!("range `{s}` is reversed"));
    }
    Ok(a..b)
}

fn resolve_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
            Config::from_json_str(&text)?
        }
        None => Config::preset(c.preset.parse::<Preset>()?),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Parses `argv` and runs; returns the process exit code.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let _ = writeln!(err, "  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

fn load_data(cfg: &Config, data: Option<&Path>, clips: u64) -> Result<Vec<TrainingSample>> {
    Ok(match data {
        Some(p) => read_shard(p, &cfg.model)?.collect::<phydiff_core::Result<_>>()?,
        None => stream_samples(0..clips, &cfg.model).collect::<phydiff_core::Result<_>>()?,
    })
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    let _ = writeln!(out, "{line}");
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let seed = cfg.train.seed;
    say(out, format_args!("config fingerprint {:016x} seed {seed}", cfg.model.fingerprint()));
    match cli.command {
        Command::Precompute { seeds, out: dir } => {
            ensure_dir(&dir)?;
            let path = dir.join(SHARD_FILE);
            let n = write_shard(stream_samples(seeds, &cfg.model), &cfg.model, &path)?;
            say(out, format_args!("wrote {n} samples to {}", path.display()));
        }
        Command::Train { steps, out: dir, data, clips, resume, freeze, detach_physics } => {
            let policy: FreezePolicy = freeze.parse()?;
            let options = TrainOptions { policy, detach_physics, objective: Objective::Joint };
            let steps = steps.unwrap_or(cfg.train.max_steps as u64);
            let samples = load_data(&cfg, data.as_deref(), clips)?;
            let o = run_training(&cfg, options, &samples, &dir, resume.as_deref(), steps)?;
            if let Some(last) = o.reports.last() {
                say(
                    out,
                    format_args!(
                        "step {} diffusion {:.5} physics {:.5} total {:.5}",
                        last.step, last.diffusion_loss, last.physics_loss, last.total_loss
                    ),
                );
            }
            say(out, format_args!("checkpoint {} (step {})", o.final_checkpoint.display(), o.final_step));
        }
        Command::Generate { checkpoint, prompt, steps, physics, out: dir } => {
            let Some(ck) = checkpoint else {
                return Err(Error::Usage(
                    "generate needs --checkpoint <file>; create one with `phydiff train --out <dir>` \
                     (it writes <dir>/final.pvgk), or use `phydiff dry-run` to exercise the pipeline untrained"
                        .into(),
                ));
            };
            let guidance: Guidance = physics.parse()?;
            let state = load_checkpoint(&ck, &cfg)?;
            let sched = NoiseSchedule::new(&cfg.diffusion)?;
            let vae = ToyVae::for_config(&cfg.model)?;
            let req = GenerationRequest { prompt, num_steps: steps.unwrap_or(sched.len()), seed, guidance };
            let v = generate(&req, &state.predictor, &state.generator, &sched, &vae)?;
            let video = Video::new(v.frames, v.shape)?;
            write_video(&video, &dir)?;
            say(out, format_args!("wrote {} frames to {}", video.frames(), dir.display()));
        }
        Command::Eval { videos, metrics, report, checkpoint, prompt, ab_seeds, steps } => {
            let sel: MetricSelection = metrics.parse()?;
            let plugins = Plugins::default();
            let rows = match (videos, checkpoint) {
                (Some(v), None) => eval_corpus(&v, sel, &plugins)?,
                (None, Some(ck)) => {
                    let state = load_checkpoint(&ck, &cfg)?;
                    let sched = NoiseSchedule::new(&cfg.diffusion)?;
                    let vae = ToyVae::for_config(&cfg.model)?;
                    let prompt = prompt.unwrap_or_default();
                    let n = steps.unwrap_or(sched.len());
                    eval_ab(&prompt, ab_seeds, n, &state.predictor, &state.generator, &sched, &vae, sel, &plugins)
                }
                _ => return Err(Error::Usage("eval needs --videos <dir> or --checkpoint <file> --prompt <text>".into())),
            };
            let s = write_report(&report, &rows)?;
            say(out, format_args!("evaluated {} videos ({} failed); report {}", s.videos, s.failed, report.display()));
        }
        Command::DryRun { prompt, out: path } => {
            let r = dry_run(&prompt, &cfg, seed)?;
            for (name, shape) in &r.shapes {
                say(out, format_args!("{name:8} {shape:?}"));
            }
            for w in &r.warnings {
                say(out, format_args!("warning: {w}"));
            }
            let bad: Vec<&str> = r.finite.iter().filter(|(_, f)| !f).map(|(n, _)| n.as_str()).collect();
            say(out, format_args!("t = {}  wall time {:.3} s  non-finite: {bad:?}", r.t, r.wall_time_s));
            if let Some(p) = path {
                let json = serde_json::to_vec_pretty(&r).map_err(|e| Error::Usage(e.to_string()))?;
                crate::io::atomic_write(&p, &json)?;
            }
            if !r.ok() {
                return Err(Error::Core(phydiff_core::Error::NonFinite(format!("dry run: {bad:?}; warnings {:?}", r.warnings))));
            }
        }
    }
    Ok(())
}
