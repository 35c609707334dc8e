//! Reverse-diffusion sampling with per-step physics tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{toy_text_embed, ToyVae};
use crate::diffusion::{ddpm_step, timestep_embedding, LatentVideo, NoiseSchedule};
use crate::error::{Error, Result};
use crate::generator::{Generator, Physics};
use crate::predictor::{PhysicsTokens, Predictor, TextEmbedding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guidance {
    PhysicsOn,
    /// Gates treated as zero; the predictor is never run.
    PhysicsOff,
}

impl core::str::FromStr for Guidance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" | "physics-on" => Ok(Self::PhysicsOn),
            "off" | "physics-off" => Ok(Self::PhysicsOff),
            other => Err(Error::Invalid(format!("physics must be `on` or `off`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Reverse steps; the chain starts at `t = num_steps − 1`.
    pub num_steps: usize,
    pub seed: u64,
    pub guidance: Guidance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedVideo {
    /// `[3, F, H, W]` row-major pixels in `0..=255`.
    pub frames: Vec<u8>,
    pub shape: [usize; 4],
    pub latents_final: LatentVideo,
    /// RMS of `p̂` at each reverse step, in execution order; zero when physics is off.
    pub per_step_physics_norm: Vec<f64>,
}

/// Anything that turns `(z_t, c, t_emb)` into physics tokens.
pub trait PhysicsSource {
    fn physics(&self, z_t: &LatentVideo, c_text: &TextEmbedding, t_emb: &[f64]) -> Result<PhysicsTokens>;
}

impl PhysicsSource for Predictor {
    fn physics(&self, z_t: &LatentVideo, c_text: &TextEmbedding, t_emb: &[f64]) -> Result<PhysicsTokens> {
        self.predict(z_t, c_text, t_emb)
    }
}

/// Maps `[-1, 1]` to `0..=255`, clamping and rounding half away from zero.
pub fn to_pixels(frames: &Tensor) -> Vec<u8> {
    frames.data().iter().map(|v| libm::round(((v + 1.0) * 0.5 * 255.0).clamp(0.0, 255.0)) as u8).collect()
}

pub fn generate<P: PhysicsSource + ?Sized>(
    req: &GenerationRequest,
    predictor: &P,
    generator: &Generator,
    sched: &NoiseSchedule,
    vae: &ToyVae,
) -> Result<GeneratedVideo> {
    let cfg: &ModelConfig = generator.config();
    if req.num_steps == 0 || req.num_steps > sched.len() {
        return Err(Error::Invalid(format!("num_steps = {} must be in 1..={}", req.num_steps, sched.len())));
    }
    let c_text = toy_text_embed(&req.prompt, cfg.text_len, cfg.text_dim);
    let shape = cfg.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut z = LatentVideo::new(Tensor::randn(&shape, 1.0, &mut rng))?;
    let mut norms = Vec::with_capacity(req.num_steps);
    for t in (0..req.num_steps).rev() {
        let temb = timestep_embedding(t, cfg.timestep_embed_dim)?;
        let eps_hat = match req.guidance {
            Guidance::PhysicsOn => {
                let p = predictor.physics(&z, &c_text, &temb)?;
                let pt = p.tensor();
                norms.push(libm::sqrt(pt.sum_sq() / pt.len().max(1) as f64));
                generator.denoise(&z, &temb, &c_text, Physics::Tokens(&p))
            }
            Guidance::PhysicsOff => {
                norms.push(0.0);
                generator.denoise(&z, &temb, &c_text, Physics::Off)
            }
        }
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at reverse step t = {t}")),
            e => e,
        })?;
        let noise = if t > 0 { LatentVideo::new(Tensor::randn(&shape, 1.0, &mut rng))? } else { LatentVideo::zeros(cfg) };
        z = ddpm_step(&z, &eps_hat, t, sched, &noise)?;
        if !z.tensor().is_finite() {
            return Err(Error::NonFinite(format!("latent after reverse step t = {t}")));
        }
    }
    let frames = vae.decode(&z)?;
    let s = frames.shape();
    let shape = [s[0], s[1], s[2], s[3]];
    Ok(GeneratedVideo { frames: to_pixels(&frames), shape, latents_final: z, per_step_physics_norm: norms })
}
