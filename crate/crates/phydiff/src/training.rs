//! Training runs on disk: JSONL loss log plus periodic checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use phydiff_core::config::Config;
use phydiff_core::data::TrainingSample;
use phydiff_core::diffusion::NoiseSchedule;
use phydiff_core::train::{train_loop, LossReport, TrainEvent, TrainOptions, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::io::ensure_dir;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.pvgk";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.pvgk")
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
    pub final_step: u64,
}

/// Trains to `max_steps` (absolute step count), starting fresh or from `resume`.
/// The loss log is appended to, so a resumed run continues the same series.
pub fn run_training(
    config: &Config,
    options: TrainOptions,
    data: &[TrainingSample],
    out_dir: &Path,
    resume: Option<&Path>,
    max_steps: u64,
) -> Result<TrainOutcome> {
    ensure_dir(out_dir)?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p, config)?,
        None => TrainState::new(config, options)?,
    };
    if state.step > max_steps {
        return Err(Error::Usage(format!("checkpoint is at step {}, beyond --steps {max_steps}", state.step)));
    }
    let sched = NoiseSchedule::new(&config.diffusion)?;
    let log_path = out_dir.join(LOSS_LOG);
    let log_file: File = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut log = BufWriter::new(log_file);
    let mut io_err: Option<Error> = None;
    let reports = train_loop(&mut state, data, &sched, max_steps, |ev| {
        let r = match ev {
            TrainEvent::Log(rep) => serde_json::to_string(rep)
                .map_err(|e| Error::Usage(format!("loss record: {e}")))
                .and_then(|line| writeln!(log, "{line}").map_err(Error::io(&log_path))),
            TrainEvent::Checkpoint(st) => {
                log.flush().map_err(Error::io(&log_path)).and_then(|_| save_checkpoint(&out_dir.join(checkpoint_name(st.step)), st))
            }
        };
        r.map_err(|e| {
            let msg = e.to_string();
            io_err = Some(e);
            phydiff_core::Error::Invalid(msg)
        })
    });
    let reports = match (reports, io_err) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    log.flush().map_err(Error::io(&log_path))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &state)?;
    Ok(TrainOutcome { reports, final_checkpoint, final_step: state.step })
}

/// Parses a loss log written by [`run_training`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Core(phydiff_core::Error::Malformed(format!("{} line {}: {e}", path.display(), i + 1)))
            })
        })
        .collect()
}
