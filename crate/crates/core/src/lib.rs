//! Physics-conditioned latent video diffusion.
//!
//! A factorized spatial/temporal transformer denoiser whose temporal blocks
//! cross-attend, through a zero-initialized gate, to physics tokens that an
//! auxiliary predictor regresses from the noisy latent. Everything here is
//! pure computation over `alloc` collections; file IO and the command line
//! live in the `phydiff` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod predictor;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
