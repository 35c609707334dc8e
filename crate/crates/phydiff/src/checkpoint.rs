use std::path::Path;

use phydiff_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use phydiff_core::config::Config;
use phydiff_core::train::TrainState;

use crate::error::Result;
use crate::io::{atomic_write, FileSource};

/// Atomic: a crash leaves either the previous file or the new one.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    atomic_write(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path, config: &Config) -> Result<TrainState> {
    let mut src = FileSource::open(path)?;
    Ok(decode_checkpoint(&mut src, config)?)
}
