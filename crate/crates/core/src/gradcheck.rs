//! Central finite-difference checks of graph gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::data::text::toy_text_embed;
use crate::diffusion::{timestep_embedding, LatentVideo};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::Bind;
use crate::params::ParamStore;
use crate::predictor::{PhysicsTokens, Predictor};
use crate::tensor::Tensor;
use crate::train::joint_loss;

const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Location of the largest error.
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self { max_rel_err: 0.0, checked: 0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        // Floored denominator: some gradients are exactly zero in theory (e.g. key
        // biases under softmax) and both sides are then rounding noise.
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = at();
        }
    }
}

/// Dimensions no larger than 4 everywhere, for exhaustive checks.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        latent_channels: 2,
        latent_frames: 2,
        latent_height: 4,
        latent_width: 4,
        text_len: 2,
        text_dim: 4,
        phys_tokens: 4,
        phys_dim: 4,
        hidden_dim: 4,
        predictor_layers: 1,
        predictor_heads: 2,
        gen_spatial_blocks: 1,
        gen_temporal_blocks: 1,
        gen_heads: 2,
        timestep_embed_dim: 4,
        vae_downsample: 2,
        phys_grid: [1, 2, 2],
    }
}

/// Compares backward-pass gradients of every parameter flagged in `flags`
/// against `(L(θ+h) − L(θ−h)) / 2h`. `build` records the loss on a fresh graph.
pub fn check_params(
    store: &mut ParamStore,
    flags: &[bool],
    h: f64,
    build: impl Fn(&ParamStore, &mut Graph) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Option<Tensor>> = alloc::vec![None; store.len()];
    for (r, t) in grads.params(&g) {
        if r.store == store.key() {
            analytic[r.id.index()] = Some(t.clone());
        }
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(s, &mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut report = GradReport::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !flags[id.index()] {
            continue;
        }
        let n = store.value(id).len();
        for i in 0..n {
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = x - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = x;
            let num = (up - down) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            report.record(a, num, || format!("{}[{i}]", store.get(id).name));
        }
    }
    if report.checked == 0 {
        return Err(Error::Invalid("no parameters selected for gradient check".into()));
    }
    Ok(report)
}

fn inputs(cfg: &ModelConfig, seed: u64) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng);
    let text = toy_text_embed("two discs collide", cfg.text_len, cfg.text_dim).into_tensor();
    let temb = timestep_embedding(3, cfg.timestep_embed_dim)?;
    let temb = Tensor::from_vec(&[temb.len()], temb)?;
    let eps = Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng);
    let p_gt = Tensor::randn(&[cfg.phys_tokens, cfg.phys_dim], 1.0, &mut rng);
    Ok((z, text, temb, eps, p_gt))
}

/// Physics cross-attention parameters, gate included, under the diffusion loss.
/// Gates are set to `gate` first so the attention branch receives gradient.
pub fn check_physics_cross_attention(seed: u64, gate: f64) -> Result<GradReport> {
    let cfg = miniature_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generator::new(&cfg, &mut rng)?;
    gen.set_gates(gate);
    let (z, text, temb, eps, _) = inputs(&cfg, seed + 1)?;
    let phys = Tensor::randn(&[cfg.phys_tokens, cfg.phys_dim], 1.0, &mut rng);
    let flags: Vec<bool> = gen.store().iter().map(|(_, p)| p.group.ends_with(".physics_xattn")).collect();
    let probe = gen.clone();
    check_params(gen.store_mut(), &flags, 1e-5, |s, g| {
        let bind = Bind::new(s, &flags);
        let (zv, tv, xv, pv) = (g.input(z.clone()), g.input(temb.clone()), g.input(text.clone()), g.input(phys.clone()));
        let out = probe.forward_on(g, &bind, zv, tv, xv, Some(pv))?;
        let target = g.input(eps.clone());
        g.mse(out, target)
    })
}

/// Every predictor parameter under the physics loss.
pub fn check_predictor(seed: u64) -> Result<GradReport> {
    let cfg = miniature_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = Predictor::new(&cfg, &mut rng)?;
    let (z, text, temb, _, p_gt) = inputs(&cfg, seed + 1)?;
    let flags = alloc::vec![true; pred.store().len()];
    let probe = pred.clone();
    check_params(pred.store_mut(), &flags, 1e-5, |s, g| {
        let bind = Bind::new(s, &flags);
        let (zv, xv, tv) = (g.input(z.clone()), g.input(text.clone()), g.input(temb.clone()));
        let out = probe.forward_on(g, &bind, zv, xv, tv)?;
        let target = g.input(p_gt.clone());
        g.mse(out, target)
    })
}

/// Graph gradient of the joint loss with respect to `ε̂` and `p̂`, against
/// finite differences of the scalar [`joint_loss`].
pub fn check_joint_loss(seed: u64, lambda: f64) -> Result<GradReport> {
    let cfg = miniature_config();
    let (eps_hat, _, _, eps, p_gt) = inputs(&cfg, seed)?;
    let p_hat = Tensor::randn(&[cfg.phys_tokens, cfg.phys_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7));
    let mut g = Graph::new();
    let (ev, pv) = (g.input_tracked(eps_hat.clone()), g.input_tracked(p_hat.clone()));
    let (et, pt) = (g.input(eps.clone()), g.input(p_gt.clone()));
    let d = g.mse(ev, et)?;
    let p = g.mse(pv, pt)?;
    let w = g.scale(p, lambda);
    let total = g.add(d, w)?;
    let grads = g.backward(total)?;
    let scalar = |e: &Tensor, p: &Tensor| -> Result<f64> {
        let (t, _, _) = joint_loss(
            &LatentVideo::new(eps.clone())?,
            &LatentVideo::new(e.clone())?,
            &PhysicsTokens::new(p.clone())?,
            &PhysicsTokens::new(p_gt.clone())?,
            lambda,
        )?;
        Ok(t)
    };
    let h = 1e-5;
    let mut report = GradReport::new();
    for (which, base, var) in [("eps_hat", &eps_hat, ev), ("p_hat", &p_hat, pv)] {
        let an = grads.wrt(var).ok_or_else(|| Error::Invalid(format!("no gradient for {which}")))?;
        for i in 0..base.len() {
            let mut up = base.clone();
            up.data_mut()[i] += h;
            let mut down = base.clone();
            down.data_mut()[i] -= h;
            let num = if which == "eps_hat" {
                (scalar(&up, &p_hat)? - scalar(&down, &p_hat)?) / (2.0 * h)
            } else {
                (scalar(&eps_hat, &up)? - scalar(&eps_hat, &down)?) / (2.0 * h)
            };
            report.record(an.data()[i], num, || format!("{which}[{i}]"));
        }
    }
    Ok(report)
}
