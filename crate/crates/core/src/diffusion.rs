//! DDPM forward process, ε-prediction reverse step, and sinusoidal timestep
//! embeddings. All functions are pure.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{DiffusionConfig, ModelConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A latent video `[C, F, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("latent must be [C,F,H,W], got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self(Tensor::zeros(&cfg.latent_shape()))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    /// Checks the shape against `cfg` and that every entry is finite.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.shape() != cfg.latent_shape() {
            return Err(Error::Shape(format!(
                "latent {:?} does not match config {:?}",
                self.shape(),
                cfg.latent_shape()
            )));
        }
        if !self.0.is_finite() {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(())
    }
}

/// Per-timestep β, α, ᾱ and posterior-variance tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_timesteps;
        let betas = match cfg.schedule_kind {
            ScheduleKind::Linear => (0..n)
                .map(|i| {
                    if n == 1 {
                        cfg.beta_start
                    } else {
                        cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                    }
                })
                .collect(),
        };
        Self::from_betas(betas)
    }

    /// Builds the tables from explicit β values in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|t| {
                if t == 0 || alpha_bars[t] >= 1.0 {
                    0.0
                } else {
                    betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])
                }
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, posterior_variances })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Timestep { t, len: self.len() });
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = √ᾱ_t · z₀ + √(1−ᾱ_t) · ε`
pub fn q_sample(z0: &LatentVideo, t: usize, eps: &LatentVideo, sched: &NoiseSchedule) -> Result<LatentVideo> {
    sched.check_t(t)?;
    same_shape(z0.tensor(), eps.tensor(), "q_sample noise")?;
    let ab = sched.alpha_bars[t];
    let (s, n) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let data = z0.tensor().data().iter().zip(eps.tensor().data()).map(|(z, e)| s * z + n * e).collect();
    Ok(LatentVideo(Tensor::from_vec(z0.shape(), data)?))
}

/// One reverse step with the posterior variance β̃_t; `noise` is ignored at `t = 0`.
pub fn ddpm_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentVideo,
) -> Result<LatentVideo> {
    sched.check_t(t)?;
    same_shape(z_t.tensor(), eps_hat.tensor(), "ddpm_step prediction")?;
    if t > 0 {
        same_shape(z_t.tensor(), noise.tensor(), "ddpm_step noise")?;
    }
    let beta = sched.betas[t];
    let inv_sqrt_alpha = 1.0 / libm::sqrt(sched.alphas[t]);
    let eps_coef = if beta == 0.0 { 0.0 } else { beta / libm::sqrt(1.0 - sched.alpha_bars[t]) };
    let mean = z_t
        .tensor()
        .data()
        .iter()
        .zip(eps_hat.tensor().data())
        .map(|(z, e)| inv_sqrt_alpha * (z - eps_coef * e));
    let data: Vec<f64> = if t == 0 {
        mean.collect()
    } else {
        let sigma = libm::sqrt(sched.posterior_variances[t]);
        mean.zip(noise.tensor().data()).map(|(m, n)| m + sigma * n).collect()
    };
    Ok(LatentVideo(Tensor::from_vec(z_t.shape(), data)?))
}

/// Sinusoidal embedding of the raw integer timestep: `[sin(t·f_i)…, cos(t·f_i)…]`
/// with `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("timestep embedding width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let ln_period = libm::log(10_000.0);
    let mut out = alloc::vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-ln_period * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::sin(arg);
        out[half + i] = libm::cos(arg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Preset};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat(shape: &[usize], seed: u64) -> LatentVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentVideo::new(Tensor::randn(shape, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn constant_betas_closed_form() {
        let b = 0.03;
        let s = NoiseSchedule::from_betas(alloc::vec![b; 20]).unwrap();
        for t in 0..20 {
            let want = (1.0f64 - b).powi(t as i32 + 1);
            assert!((s.alpha_bars()[t] - want).abs() < 1e-14);
            assert_eq!(s.alphas()[t], 1.0 - s.betas()[t]);
        }
    }

    #[test]
    fn hand_product_t4() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((s.alpha_bars()[3] - 0.3024).abs() < 1e-12);
        assert_eq!(s.posterior_variances()[0], 0.0);
        let want = 0.2 * (1.0 - 0.9) / (1.0 - 0.72);
        assert!((s.posterior_variances()[1] - want).abs() < 1e-15);
    }

    #[test]
    fn toy_schedule_invariants() {
        let cfg = Config::preset(Preset::Toy).diffusion;
        let s = NoiseSchedule::new(&cfg).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars().last().unwrap() > 0.0);
        assert!(s.alpha_bars()[0] <= 1.0);
        assert!((s.betas()[0] - 1e-4).abs() < 1e-18 && (s.betas()[49] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn q_sample_zero_noise_and_inverse() {
        let s = NoiseSchedule::new(&Config::preset(Preset::Toy).diffusion).unwrap();
        let z0 = lat(&[2, 2, 3, 3], 1);
        let zero = LatentVideo::new(Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        let zt = q_sample(&z0, 17, &zero, &s).unwrap();
        let sa = s.alpha_bars()[17].sqrt();
        for (a, b) in zt.tensor().data().iter().zip(z0.tensor().data()) {
            assert_eq!(*a, sa * b);
        }
        let eps = lat(&[2, 2, 3, 3], 2);
        let zt = q_sample(&z0, 30, &eps, &s).unwrap();
        let ab = s.alpha_bars()[30];
        for ((z, e), x) in zt.tensor().data().iter().zip(eps.tensor().data()).zip(z0.tensor().data()) {
            let rec = (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
            assert!((rec - x).abs() <= 1e-6 * x.abs().max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn q_sample_errors() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.1; 4]).unwrap();
        let a = lat(&[1, 2, 2, 2], 0);
        let b = lat(&[1, 2, 2, 1], 0);
        assert!(matches!(q_sample(&a, 4, &a, &s), Err(Error::Timestep { t: 4, len: 4 })));
        assert!(matches!(q_sample(&a, 0, &b, &s), Err(Error::Shape(_))));
        assert!(matches!(ddpm_step(&a, &b, 1, &s, &a), Err(Error::Shape(_))));
        assert!(matches!(ddpm_step(&a, &a, 9, &s, &a), Err(Error::Timestep { .. })));
    }

    #[test]
    fn ddpm_step_t0_ignores_noise() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.05, 0.1]).unwrap();
        let z = lat(&[1, 2, 2, 2], 3);
        let e = lat(&[1, 2, 2, 2], 4);
        let a = ddpm_step(&z, &e, 0, &s, &lat(&[1, 2, 2, 2], 5)).unwrap();
        let b = ddpm_step(&z, &e, 0, &s, &lat(&[1, 2, 2, 2], 6)).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
        let c = ddpm_step(&z, &e, 1, &s, &lat(&[1, 2, 2, 2], 5)).unwrap();
        let d = ddpm_step(&z, &e, 1, &s, &lat(&[1, 2, 2, 2], 6)).unwrap();
        assert!(!c.tensor().bit_eq(d.tensor()));
    }

    #[test]
    fn ddpm_step_degenerate_beta_is_identity() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.0, 0.0]).unwrap();
        let z = lat(&[1, 2, 2, 2], 3);
        let zero = LatentVideo::new(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        for t in 0..2 {
            let out = ddpm_step(&z, &zero, t, &s, &lat(&[1, 2, 2, 2], 9)).unwrap();
            assert!(out.tensor().bit_eq(z.tensor()));
        }
    }

    #[test]
    fn single_step_chain_recovers_z0() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.02]).unwrap();
        let z0 = lat(&[2, 2, 2, 2], 10);
        let eps = lat(&[2, 2, 2, 2], 11);
        let z1 = q_sample(&z0, 0, &eps, &s).unwrap();
        let rec = ddpm_step(&z1, &eps, 0, &s, &eps).unwrap();
        for (a, b) in rec.tensor().data().iter().zip(z0.tensor().data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn q_sample_variance_matches_one_minus_alpha_bar() {
        let s = NoiseSchedule::new(&Config::preset(Preset::Toy).diffusion).unwrap();
        let shape = [1, 1, 2, 2];
        let z0 = LatentVideo::new(Tensor::zeros(&shape)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for t in [0, 10, 49] {
            let mut sum = [0.0; 4];
            let mut sq = [0.0; 4];
            let n = 10_000;
            for _ in 0..n {
                let eps = LatentVideo::new(Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
                let zt = q_sample(&z0, t, &eps, &s).unwrap();
                for (k, v) in zt.tensor().data().iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            let want = 1.0 - s.alpha_bars()[t];
            for k in 0..4 {
                let m = sum[k] / n as f64;
                let var = sq[k] / n as f64 - m * m;
                assert!((var / want - 1.0).abs() < 0.05, "t {t}: {var} vs {want}");
            }
        }
    }

    #[test]
    fn reverse_chain_with_oracle_noise_prediction_recovers_z0() {
        // With ε̂ equal to the ε implied by (z_t, z0), each mean step lands on the
        // posterior mean, so a noiseless chain converges back to z0.
        let s = NoiseSchedule::from_betas(alloc::vec![0.05, 0.1, 0.2]).unwrap();
        let z0 = lat(&[1, 1, 2, 2], 20);
        let eps = lat(&[1, 1, 2, 2], 21);
        let mut z = q_sample(&z0, 2, &eps, &s).unwrap();
        let zero = LatentVideo::new(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        for t in (0..3).rev() {
            let ab = s.alpha_bars()[t];
            let implied: Vec<f64> = z
                .tensor()
                .data()
                .iter()
                .zip(z0.tensor().data())
                .map(|(zt, x)| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt())
                .collect();
            let e = LatentVideo::new(Tensor::from_vec(&[1, 1, 2, 2], implied).unwrap()).unwrap();
            z = ddpm_step(&z, &e, t, &s, &zero).unwrap();
        }
        assert!(z.tensor().max_abs_diff(z0.tensor()) < 1e-9);
    }

    #[test]
    fn timestep_embedding_properties() {
        let e0 = timestep_embedding(0, 8).unwrap();
        assert!(e0[..4].iter().all(|v| *v == 0.0));
        assert!(e0[4..].iter().all(|v| *v == 1.0));
        assert_eq!(timestep_embedding(13, 32).unwrap(), timestep_embedding(13, 32).unwrap());
        assert!(timestep_embedding(1, 7).is_err());
        let embs: Vec<Vec<f64>> = (0..50).map(|t| timestep_embedding(t, 32).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..50 {
            for j in i + 1..50 {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    proptest! {
        #[test]
        fn q_sample_is_linear(seed in 0u64..1000, t in 0usize..50, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let s = NoiseSchedule::new(&Config::preset(Preset::Toy).diffusion).unwrap();
            let shape = [1, 2, 2, 2];
            let (x1, x2, e1, e2) = (lat(&shape, seed), lat(&shape, seed + 1), lat(&shape, seed + 2), lat(&shape, seed + 3));
            let comb = |p: &LatentVideo, q: &LatentVideo| {
                let d = p.tensor().data().iter().zip(q.tensor().data()).map(|(u, v)| a * u + b * v).collect();
                LatentVideo::new(Tensor::from_vec(&shape, d).unwrap()).unwrap()
            };
            let lhs = q_sample(&comb(&x1, &x2), t, &comb(&e1, &e2), &s).unwrap();
            let r1 = q_sample(&x1, t, &e1, &s).unwrap();
            let r2 = q_sample(&x2, t, &e2, &s).unwrap();
            let rhs = comb(&r1, &r2);
            prop_assert!(lhs.tensor().max_abs_diff(rhs.tensor()) < 1e-10);
        }
    }
}
