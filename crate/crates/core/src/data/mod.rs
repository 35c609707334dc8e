//! Training triples `(z₀, c_text, p_gt)` produced from procedural clips.

pub mod codec;
pub mod physics;
pub mod shard;
pub mod synth;
pub mod text;

use alloc::format;
use alloc::string::String;
use alloc::boxed::Box;

use crate::config::ModelConfig;
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::predictor::{PhysicsTokens, TextEmbedding};

pub use codec::ToyVae;
pub use physics::toy_physics_extract;
pub use synth::{synth_clip, ClipDims, ClipKind, VideoClip};
pub use text::toy_text_embed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub z0: LatentVideo,
    pub c_text: TextEmbedding,
    pub p_gt: PhysicsTokens,
    pub prompt: String,
    pub sample_id: String,
}

impl TrainingSample {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        self.z0.check(cfg)?;
        self.c_text.check(cfg)?;
        self.p_gt.check(cfg)
    }
}

/// Stable sample id for a seed.
pub fn sample_id(seed: u64) -> String {
    format!("{}-{seed:010}", ClipKind::for_seed(seed).name())
}

/// Builds the sample for one seed: synthesize → encode → embed → extract.
/// Every tensor is rounded to f32 precision so shards store it exactly.
pub fn make_sample(seed: u64, cfg: &ModelConfig, vae: &ToyVae) -> Result<TrainingSample> {
    let id = sample_id(seed);
    let wrap = |e: Error| Error::Sample { id: id.clone(), source: Box::new(e) };
    let clip = synth_clip(seed, ClipKind::for_seed(seed), ClipDims::from_config(cfg));
    let z0 = vae.encode(&clip.frames).map_err(wrap)?;
    let z0 = LatentVideo::new(z0.into_tensor().map(|v| v as f32 as f64)).map_err(wrap)?;
    let c_text = toy_text_embed(&clip.prompt, cfg.text_len, cfg.text_dim);
    let p_gt = toy_physics_extract(&clip.frames, cfg).map_err(wrap)?;
    let sample = TrainingSample { z0, c_text, p_gt, prompt: clip.prompt, sample_id: id.clone() };
    sample.check(cfg).map_err(wrap)?;
    Ok(sample)
}

/// Lazily yields one sample per seed; nothing is retained between items.
pub fn stream_samples<'a, I>(seeds: I, cfg: &'a ModelConfig) -> impl Iterator<Item = Result<TrainingSample>> + 'a
where
    I: IntoIterator<Item = u64>,
    I::IntoIter: 'a,
{
    let vae = ToyVae::for_config(cfg);
    let mut seeds = seeds.into_iter();
    let mut failed = false;
    core::iter::from_fn(move || {
        if failed {
            return None;
        }
        let seed = seeds.next()?;
        match &vae {
            Ok(vae) => Some(make_sample(seed, cfg, vae)),
            Err(e) => {
                failed = true;
                Some(Err(Error::Sample { id: sample_id(seed), source: Box::new(e.clone()) }))
            }
        }
    })
}
