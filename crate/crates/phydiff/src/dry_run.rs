//! One untrained reverse step, reporting every intermediate shape.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use phydiff_core::config::Config;
use phydiff_core::data::toy_text_embed;
use phydiff_core::diffusion::{ddpm_step, timestep_embedding, LatentVideo, NoiseSchedule};
use phydiff_core::generator::{Generator, Physics};
use phydiff_core::predictor::Predictor;
use phydiff_core::tensor::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct DryRunReport {
    pub t: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub finite: Vec<(String, bool)>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl DryRunReport {
    pub fn ok(&self) -> bool {
        self.warnings.is_empty() && self.finite.iter().all(|(_, f)| *f)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// Randomly initialized models from `seed`; no checkpoint is read.
pub fn dry_run(prompt: &str, config: &Config, seed: u64) -> Result<DryRunReport> {
    let start = Instant::now();
    let cfg = &config.model;
    let warnings = cfg.validate_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let predictor = Predictor::new(cfg, &mut rng)?;
    let generator = Generator::new(cfg, &mut rng)?;
    let sched = NoiseSchedule::new(&config.diffusion)?;
    let t = sched.len() - 1;

    let z = LatentVideo::new(Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng))?;
    let c_text = toy_text_embed(prompt, cfg.text_len, cfg.text_dim);
    let temb = timestep_embedding(t, cfg.timestep_embed_dim)?;
    let p_hat = predictor.predict(&z, &c_text, &temb)?;
    let eps_hat = generator.denoise(&z, &temb, &c_text, Physics::Tokens(&p_hat))?;
    let noise = LatentVideo::new(Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng))?;
    let z_prev = ddpm_step(&z, &eps_hat, t, &sched, &noise)?;

    let tensors: [(&str, &Tensor); 5] = [
        ("z_T", z.tensor()),
        ("c_text", c_text.tensor()),
        ("p_hat", p_hat.tensor()),
        ("eps_hat", eps_hat.tensor()),
        ("z_prev", z_prev.tensor()),
    ];
    let mut shapes = vec![("t_emb".to_string(), vec![temb.len()])];
    shapes.extend(tensors.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())));
    let mut finite = vec![("t_emb".to_string(), temb.iter().all(|v| v.is_finite()))];
    finite.extend(tensors.iter().map(|(n, t)| (n.to_string(), t.is_finite())));
    Ok(DryRunReport { t, shapes, finite, warnings, wall_time_s: start.elapsed().as_secs_f64() })
}
