//! Exactly invertible toy video codec.
//!
//! Each non-overlapping `f×f` pixel patch of all three channels is flattened
//! in `(channel, row, col)` order and mapped through an orthonormal DCT-II
//! basis, giving `3·f²` latent channels at `1/f` spatial resolution. No
//! temporal compression.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ToyVae {
    factor: usize,
    /// Row `k` is basis vector `k`; `[n, n]` with `n = 3·factor²`.
    basis: Vec<f64>,
    /// Latents are multiplied by this after encoding and divided before decoding.
    pub scaling_factor: f64,
}

impl ToyVae {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config { field: "vae_downsample".into(), reason: "must be positive".into() });
        }
        Ok(Self { factor, basis: dct_basis(3 * factor * factor), scaling_factor: 1.0 })
    }

    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        if !cfg.codec_compatible() {
            return Err(Error::Config {
                field: "latent_channels".into(),
                reason: format!(
                    "the toy codec produces 3·{0}² = {1} channels, config has {2}",
                    cfg.vae_downsample,
                    3 * cfg.vae_downsample * cfg.vae_downsample,
                    cfg.latent_channels
                ),
            });
        }
        Self::new(cfg.vae_downsample)
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    /// `[3, F, H, W]` pixels → `[3f², F, H/f, W/f]` latents.
    pub fn encode(&self, frames: &Tensor) -> Result<LatentVideo> {
        let &[c, nf, h, w] = frames.shape() else {
            return Err(Error::Shape(format!("frames must be [3, F, H, W], got {:?}", frames.shape())));
        };
        let f = self.factor;
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("frames {:?}: need 3 channels and H, W divisible by {f}", frames.shape())));
        }
        let (hp, wp, n) = (h / f, w / f, self.latent_channels());
        let mut out = vec![0.0; n * nf * hp * wp];
        let mut patch = vec![0.0; n];
        let x = frames.data();
        for t in 0..nf {
            for i in 0..hp {
                for j in 0..wp {
                    for ch in 0..3 {
                        for di in 0..f {
                            for dj in 0..f {
                                patch[(ch * f + di) * f + dj] = x[((ch * nf + t) * h + i * f + di) * w + j * f + dj];
                            }
                        }
                    }
                    for k in 0..n {
                        let row = &self.basis[k * n..(k + 1) * n];
                        let v: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                        out[((k * nf + t) * hp + i) * wp + j] = v * self.scaling_factor;
                    }
                }
            }
        }
        LatentVideo::new(Tensor::from_vec(&[n, nf, hp, wp], out)?)
    }

    /// Inverse of [`encode`](Self::encode). Each frame decodes independently.
    pub fn decode(&self, z: &LatentVideo) -> Result<Tensor> {
        let &[n, nf, hp, wp] = z.shape() else { unreachable!("latent is rank 4") };
        if n != self.latent_channels() {
            return Err(Error::Shape(format!("latent has {n} channels, codec expects {}", self.latent_channels())));
        }
        let f = self.factor;
        let (h, w) = (hp * f, wp * f);
        let mut out = vec![0.0; 3 * nf * h * w];
        let mut coef = vec![0.0; n];
        let zd = z.tensor().data();
        for t in 0..nf {
            for i in 0..hp {
                for j in 0..wp {
                    for (k, c) in coef.iter_mut().enumerate() {
                        *c = zd[((k * nf + t) * hp + i) * wp + j] / self.scaling_factor;
                    }
                    for ch in 0..3 {
                        for di in 0..f {
                            for dj in 0..f {
                                let m = (ch * f + di) * f + dj;
                                let v: f64 = (0..n).map(|k| self.basis[k * n + m] * coef[k]).sum();
                                out[((ch * nf + t) * h + i * f + di) * w + j * f + dj] = v;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[3, nf, h, w], out)
    }
}

/// Orthonormal DCT-II matrix, row-major `[n, n]`.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { libm::sqrt(1.0 / nf) } else { libm::sqrt(2.0 / nf) };
        for m in 0..n {
            b[k * n + m] = scale * libm::cos(core::f64::consts::PI * (m as f64 + 0.5) * k as f64 / nf);
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_is_orthonormal() {
        let n = 12;
        let b = dct_basis(n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|m| b[i * n + m] * b[j * n + m]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_and_norm() {
        let vae = ToyVae::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let x = Tensor::uniform(&[3, 8, 16, 16], 1.0, &mut rng);
            let z = vae.encode(&x).unwrap();
            assert_eq!(z.shape(), &[12, 8, 8, 8]);
            let rel = (z.tensor().sum_sq().sqrt() - x.sum_sq().sqrt()).abs() / x.sum_sq().sqrt();
            assert!(rel < 1e-5);
            assert!(vae.decode(&z).unwrap().max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn zero_frames_give_zero_latents() {
        let vae = ToyVae::new(2).unwrap();
        let z = vae.encode(&Tensor::zeros(&[3, 4, 8, 8])).unwrap();
        assert!(z.tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let vae = ToyVae::new(2).unwrap();
        assert!(matches!(vae.encode(&Tensor::zeros(&[3, 4, 7, 8])), Err(Error::Shape(_))));
        assert!(matches!(vae.encode(&Tensor::zeros(&[1, 4, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_patch_lands_in_dc_channel() {
        let vae = ToyVae::new(2).unwrap();
        let z = vae.encode(&Tensor::full(&[3, 1, 2, 2], 0.5)).unwrap();
        assert!((z.tensor().data()[0] - 0.5 * 12f64.sqrt()).abs() < 1e-12);
        assert!(z.tensor().data()[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
