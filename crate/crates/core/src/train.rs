//! Joint optimization of the predictor and the generator's trainable layers.
//!
//! Per sample: `t ~ U[0, T)`, `ε ~ N(0, I)`, `z_t = q_sample(z₀, t, ε)`,
//! `p̂ = P(z_t, c, t)`, `ε̂ = G(z_t, t, c, p̂)`, and
//! `L = mse(ε̂, ε) + λ·mse(p̂, p_gt)`. Losses are averaged over the batch and
//! one AdamW step is applied to trainable parameters only. The diffusion loss
//! reaches the predictor through `p̂` unless physics is detached.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::Config;
use crate::data::TrainingSample;
use crate::diffusion::{q_sample, timestep_embedding, LatentVideo, NoiseSchedule};
use crate::error::{Error, Result};
use crate::generator::{FreezePolicy, Generator, GENERATOR_STORE};
use crate::nn::{trainable_flags, Bind};
use crate::params::ParamStore;
use crate::predictor::{PhysicsTokens, Predictor, PREDICTOR_STORE};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mean-squared losses `(total, diffusion, physics)` with `total = diffusion + λ·physics`.
pub fn joint_loss(
    eps: &LatentVideo,
    eps_hat: &LatentVideo,
    p_hat: &PhysicsTokens,
    p_gt: &PhysicsTokens,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    let diffusion = mse(eps.tensor(), eps_hat.tensor(), "noise prediction")?;
    let physics = mse(p_hat.tensor(), p_gt.tensor(), "physics tokens")?;
    Ok((diffusion + lambda * physics, diffusion, physics))
}

fn mse(a: &Tensor, b: &Tensor, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// What a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Diffusion plus weighted physics loss over predictor and generator.
    Joint,
    /// Physics loss alone on the predictor, `t` drawn from `[0, t_max)`; the
    /// generator is never evaluated.
    PredictorOnly { t_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    pub policy: FreezePolicy,
    /// Stop the diffusion loss from reaching the predictor through `p̂`.
    pub detach_physics: bool,
    pub objective: Objective,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { policy: FreezePolicy::Paper, detach_physics: false, objective: Objective::Joint }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub diffusion_loss: f64,
    pub physics_loss: f64,
    pub total_loss: f64,
    #[serde(rename = "grad_norm")]
    pub grad_norm_trainable: f64,
    #[serde(rename = "gates")]
    pub gate_values: Vec<f64>,
}

/// First and second moments for every tensor of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Moments {
    pub fn zeros(store: &ParamStore) -> Self {
        let z: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub predictor: Moments,
    pub generator: Moments,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, predictor: &ParamStore, generator: &ParamStore) -> Self {
        Self { lr, weight_decay, t: 0, predictor: Moments::zeros(predictor), generator: Moments::zeros(generator) }
    }

    /// One update. Parameters without a gradient (frozen or unused) are untouched.
    fn apply(&mut self, pred: &mut ParamStore, gen: &mut ParamStore, gp: &[Option<Tensor>], gg: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, self.t as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, self.t as f64);
        let (lr, wd) = (self.lr, self.weight_decay);
        for (store, mom, grads) in [(pred, &mut self.predictor, gp), (gen, &mut self.generator, gg)] {
            for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                let Some(g) = &grads[i] else { continue };
                let w = store.value_mut(id).data_mut();
                let m = mom.m[i].data_mut();
                let v = mom.v[i].data_mut();
                for k in 0..w.len() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g.data()[k];
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g.data()[k] * g.data()[k];
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    w[k] -= lr * (mh / (libm::sqrt(vh) + ADAM_EPS) + wd * w[k]);
                }
            }
        }
    }
}

/// Per-sample losses and parameter gradients (unscaled by batch size).
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub total: f64,
    pub diffusion: f64,
    pub physics: f64,
    pub predictor: Vec<Option<Tensor>>,
    pub generator: Vec<Option<Tensor>>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub predictor: Predictor,
    pub generator: Generator,
    pub optimizer: AdamW,
    /// Draws `t` and `ε`; independent of the initialization stream.
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub options: TrainOptions,
}

impl TrainState {
    /// Fresh models from `config.train.seed`.
    pub fn new(config: &Config, options: TrainOptions) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let predictor = Predictor::new(&config.model, &mut init)?;
        let generator = Generator::new(&config.model, &mut init)?;
        let optimizer =
            AdamW::new(config.train.learning_rate, config.train.weight_decay, predictor.store(), generator.store());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self { config: config.clone(), predictor, generator, optimizer, rng, step: 0, options })
    }

    pub fn predictor_flags(&self) -> Vec<bool> {
        let mask = self.predictor.all_trainable();
        trainable_flags(self.predictor.store(), &mask)
    }

    pub fn generator_flags(&self) -> Vec<bool> {
        let mask = match self.options.objective {
            Objective::Joint => self.generator.apply_freeze(self.options.policy),
            Objective::PredictorOnly { .. } => crate::params::FreezeMask::from_fn(self.generator.store(), |_| false),
        };
        trainable_flags(self.generator.store(), &mask)
    }

    /// Loss and gradients for one sample at a given `t` and `ε`.
    pub fn sample_grads(
        &self,
        sample: &TrainingSample,
        t: usize,
        eps: &LatentVideo,
        sched: &NoiseSchedule,
        pred_flags: &[bool],
        gen_flags: &[bool],
    ) -> Result<SampleGrads> {
        let cfg = &self.config.model;
        sample.check(cfg)?;
        let lambda = self.config.train.lambda_phys;
        let z_t = q_sample(&sample.z0, t, eps, sched)?;
        let temb = timestep_embedding(t, cfg.timestep_embed_dim)?;

        let pp = Bind::new(self.predictor.store(), pred_flags);
        let gp = Bind::new(self.generator.store(), gen_flags);
        let mut g = Graph::new();
        let z = g.input(z_t.into_tensor());
        let text = g.input(sample.c_text.tensor().clone());
        let tv = g.input(Tensor::from_vec(&[temb.len()], temb)?);
        let p_hat = self.predictor.forward_on(&mut g, &pp, z, text, tv)?;
        let p_gt = g.input(sample.p_gt.tensor().clone());
        let physics = g.mse(p_hat, p_gt)?;
        let (loss, diffusion) = match self.options.objective {
            Objective::Joint => {
                let phys_in = if self.options.detach_physics { g.detach(p_hat) } else { p_hat };
                let eps_hat = self.generator.forward_on(&mut g, &gp, z, tv, text, Some(phys_in))?;
                let target = g.input(eps.tensor().clone());
                let diffusion = g.mse(eps_hat, target)?;
                let weighted = g.scale(physics, lambda);
                (g.add(diffusion, weighted)?, Some(diffusion))
            }
            Objective::PredictorOnly { .. } => (g.scale(physics, lambda), None),
        };
        let diffusion = diffusion.map_or(0.0, |d| g.value(d).data()[0]);
        let physics = g.value(physics).data()[0];
        let total = g.value(loss).data()[0];
        if !diffusion.is_finite() {
            return Err(Error::NonFinite(format!("diffusion_loss (t = {t}, sample {})", sample.sample_id)));
        }
        if !physics.is_finite() {
            return Err(Error::NonFinite(format!("physics_loss (t = {t}, sample {})", sample.sample_id)));
        }
        let grads = g.backward(loss)?;
        let mut pg: Vec<Option<Tensor>> = vec![None; self.predictor.store().len()];
        let mut gg: Vec<Option<Tensor>> = vec![None; self.generator.store().len()];
        for (r, grad) in grads.params(&g) {
            let slot = match r.store {
                PREDICTOR_STORE => &mut pg[r.id.index()],
                GENERATOR_STORE => &mut gg[r.id.index()],
                other => return Err(Error::Invalid(format!("gradient for unknown store {other}"))),
            };
            match slot {
                Some(acc) => acc.add_assign(grad),
                None => *slot = Some(grad.clone()),
            }
        }
        Ok(SampleGrads { total, diffusion, physics, predictor: pg, generator: gg })
    }

    /// One optimizer step over a batch.
    pub fn train_step(&mut self, batch: &[TrainingSample], sched: &NoiseSchedule) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let pred_flags = self.predictor_flags();
        let gen_flags = self.generator_flags();
        let t_max = match self.options.objective {
            Objective::Joint => sched.len(),
            Objective::PredictorOnly { t_max } => t_max.clamp(1, sched.len()),
        };
        let inv_b = 1.0 / batch.len() as f64;
        let mut pg: Vec<Option<Tensor>> = vec![None; self.predictor.store().len()];
        let mut gg: Vec<Option<Tensor>> = vec![None; self.generator.store().len()];
        let (mut diffusion, mut physics) = (0.0, 0.0);
        for sample in batch {
            let t = self.rng.random_range(0..t_max);
            let eps = LatentVideo::new(Tensor::randn(&self.config.model.latent_shape(), 1.0, &mut self.rng))?;
            let s = self.sample_grads(sample, t, &eps, sched, &pred_flags, &gen_flags).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {}", self.step + 1)),
                e => e,
            })?;
            diffusion += s.diffusion * inv_b;
            physics += s.physics * inv_b;
            for (acc, g) in pg.iter_mut().zip(s.predictor).chain(gg.iter_mut().zip(s.generator)) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.add_assign(&g),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        let mut sq = 0.0;
        for g in pg.iter_mut().chain(gg.iter_mut()).flatten() {
            for v in g.data_mut() {
                *v *= inv_b;
            }
            sq += g.sum_sq();
        }
        let grad_norm = libm::sqrt(sq);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step + 1)));
        }
        self.optimizer.apply(self.predictor.store_mut(), self.generator.store_mut(), &pg, &gg);
        self.step += 1;
        let lambda = self.config.train.lambda_phys;
        Ok(LossReport {
            step: self.step,
            diffusion_loss: diffusion,
            physics_loss: physics,
            total_loss: diffusion + lambda * physics,
            grad_norm_trainable: grad_norm,
            gate_values: self.generator.gate_values(),
        })
    }
}

/// Dataset indices for a step: each epoch is a seeded permutation, so the
/// batch sequence is a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, dataset_len: usize, batch_size: usize) -> Vec<usize> {
    let n = dataset_len as u64;
    if n == 0 {
        return Vec::new();
    }
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = step * batch_size as u64 + i;
            let epoch = pos / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 + epoch);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[(pos % n) as usize]
        })
        .collect()
}

pub enum TrainEvent<'a> {
    Log(&'a LossReport),
    Checkpoint(&'a TrainState),
}

/// Runs until `state.step == max_steps`, calling `observer` on every logged
/// step and every checkpoint step. Returns the logged reports.
pub fn train_loop(
    state: &mut TrainState,
    data: &[TrainingSample],
    sched: &NoiseSchedule,
    max_steps: u64,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if data.is_empty() && state.step < max_steps {
        return Err(Error::Invalid("training data is empty".into()));
    }
    let tc = state.config.train.clone();
    let mut logged = Vec::new();
    let mut batch = Vec::with_capacity(tc.batch_size);
    while state.step < max_steps {
        batch.clear();
        batch.extend(batch_indices(tc.seed, state.step, data.len(), tc.batch_size).into_iter().map(|i| data[i].clone()));
        let report = state.train_step(&batch, sched)?;
        if tc.log_every > 0 && report.step % tc.log_every as u64 == 0 {
            observer(TrainEvent::Log(&report))?;
            logged.push(report);
        }
        if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every as u64 == 0 {
            observer(TrainEvent::Checkpoint(state))?;
        }
    }
    Ok(logged)
}

/// Trailing moving average of a series; entry `i` averages the last `window` values up to `i`.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
