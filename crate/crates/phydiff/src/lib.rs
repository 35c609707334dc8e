//! File formats, training runs, evaluation and the command line on top of
//! [`phydiff_core`].

pub mod checkpoint;
pub mod cli;
pub mod dry_run;
pub mod error;
pub mod eval;
pub mod io;
pub mod memory;
pub mod shard;
pub mod training;
pub mod video;

pub use error::{Error, Result};
