//! Motion-statistics physics targets.
//!
//! The clip is cut into a `[frames, rows, cols]` grid of cells (the config's
//! `phys_grid`); each cell becomes one token of hand-crafted statistics over
//! its pixels. Per RGB channel:
//!
//! | offset | statistic |
//! |---|---|
//! | 0 | mean intensity |
//! | 1 | mean temporal difference `d` (signed) |
//! | 2 | mean `|d|` |
//! | 3, 4 | mean `|∂x|`, `|∂y|` |
//! | 5, 6 | mean `∂x`, `∂y` (signed) |
//!
//! followed by grey-level features: the `d`-weighted centroid offset in x and
//! y (a signed motion direction), mean `d·∂x` and `d·∂y`, intensity variance
//! and variance of `d`. The 27 values are standardized with frozen constants
//! and zero-padded or truncated to `Dp`.
//!
//! `d` is the central difference in time (one-sided at the ends), so reversing
//! a clip negates every signed temporal feature at the mirrored cell. Only
//! appearance features are centred; temporal features are scaled but not
//! shifted, which keeps them exactly zero on static clips.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::predictor::PhysicsTokens;
use crate::tensor::Tensor;

pub const FEATURES: usize = 27;

/// Clips used to derive [`STANDARDIZATION`]: seeds `0..CALIBRATION_CLIPS`,
/// kind cycling with the seed, at the toy clip size and grid.
pub const CALIBRATION_CLIPS: u64 = 256;

/// Feature indices that are centred before scaling.
const CENTRED: [usize; 10] = [0, 3, 4, 7, 10, 11, 14, 17, 18, 25];

/// Feature indices that change sign under time reversal.
pub const TIME_ODD: [usize; 7] = [1, 8, 15, 21, 22, 23, 24];

/// Feature indices derived from the temporal difference.
pub const TEMPORAL: [usize; 11] = [1, 2, 8, 9, 15, 16, 21, 22, 23, 24, 26];

/// `(centre, scale)` per feature from the calibration run.
#[rustfmt::skip]
pub const STANDARDIZATION: [(f64, f64); FEATURES] = [
    (-0.851817606091742, 0.2963427111047613),
    (0.0, 0.11319973757210668),
    (0.0, 0.1298036658669331),
    (0.06926829277436015, 0.11442137095137445),
    (0.06643483323975687, 0.10508722431171856),
    (0.0, 0.12111716355239191),
    (0.0, 0.11026371778859062),
    (-0.8494665090284167, 0.30168094669972156),
    (0.0, 0.11570260459710205),
    (0.0, 0.1317854592707248),
    (0.07020428570615544, 0.11623472507380264),
    (0.06739963406569816, 0.10647461963724429),
    (0.0, 0.12330556205427798),
    (0.0, 0.11169821357431957),
    (-0.8499671970873875, 0.3014132133716595),
    (0.0, 0.11435443696972925),
    (0.0, 0.13130638020932073),
    (0.0699393861574294, 0.1158432609445228),
    (0.06700307587479622, 0.1061507675576569),
    (0.0, 0.12288667476452095),
    (0.0, 0.11151030362027234),
    (0.0, 0.5154760260127926),
    (0.0, 0.5205259112436124),
    (0.0, 0.052245327187647225),
    (0.0, 0.04064952296098316),
    (0.0809315494647357, 0.1435342137779696),
    (0.0, 0.061665863619998006),
];

/// Raw statistics per cell, cells ordered `(t, row, col)`.
pub fn raw_features(frames: &Tensor, grid: [usize; 3]) -> Result<Vec<[f64; FEATURES]>> {
    let &[c, nf, h, w] = frames.shape() else {
        return Err(Error::Shape(format!("frames must be [3, F, H, W], got {:?}", frames.shape())));
    };
    if c != 3 {
        return Err(Error::Shape(format!("frames need 3 channels, got {c}")));
    }
    if nf < 2 {
        return Err(Error::Invalid(format!("physics extraction needs at least 2 frames, got {nf}")));
    }
    let [gt, gy, gx] = grid;
    if gt == 0 || gy == 0 || gx == 0 || gt > nf || gy > h || gx > w {
        return Err(Error::Config {
            field: "phys_grid".into(),
            reason: format!("grid {grid:?} does not fit a {nf}x{h}x{w} clip"),
        });
    }
    let x = frames.data();
    let plane = h * w;
    let at = |ch: usize, t: usize, i: usize, j: usize| x[(ch * nf + t) * plane + i * w + j];
    let diff_t = |ch: usize, t: usize, i: usize, j: usize| {
        if t == 0 {
            at(ch, 1, i, j) - at(ch, 0, i, j)
        } else if t == nf - 1 {
            at(ch, nf - 1, i, j) - at(ch, nf - 2, i, j)
        } else {
            0.5 * (at(ch, t + 1, i, j) - at(ch, t - 1, i, j))
        }
    };
    let grad = |ch: usize, t: usize, i: usize, j: usize| {
        let gxv = if w < 2 {
            0.0
        } else if j == 0 {
            at(ch, t, i, 1) - at(ch, t, i, 0)
        } else if j == w - 1 {
            at(ch, t, i, w - 1) - at(ch, t, i, w - 2)
        } else {
            0.5 * (at(ch, t, i, j + 1) - at(ch, t, i, j - 1))
        };
        let gyv = if h < 2 {
            0.0
        } else if i == 0 {
            at(ch, t, 1, j) - at(ch, t, 0, j)
        } else if i == h - 1 {
            at(ch, t, h - 1, j) - at(ch, t, h - 2, j)
        } else {
            0.5 * (at(ch, t, i + 1, j) - at(ch, t, i - 1, j))
        };
        (gxv, gyv)
    };
    let span = |k: usize, g: usize, n: usize| (k * n / g, (k + 1) * n / g);

    let mut cells = Vec::with_capacity(gt * gy * gx);
    for ct in 0..gt {
        let (t0, t1) = span(ct, gt, nf);
        for cy in 0..gy {
            let (i0, i1) = span(cy, gy, h);
            for cx in 0..gx {
                let (j0, j1) = span(cx, gx, w);
                let count = ((t1 - t0) * (i1 - i0) * (j1 - j0)) as f64;
                let (xc, yc) = (0.5 * (j0 + j1) as f64, 0.5 * (i0 + i1) as f64);
                let mut feat = [0.0; FEATURES];
                let (mut sd_x, mut sd_y, mut sabs) = (0.0, 0.0, 0.0);
                let (mut dgx, mut dgy) = (0.0, 0.0);
                let (mut si, mut si2, mut sdv, mut sd2) = (0.0, 0.0, 0.0, 0.0);
                for t in t0..t1 {
                    for i in i0..i1 {
                        for j in j0..j1 {
                            let (mut gi, mut gd, mut ggx, mut ggy) = (0.0, 0.0, 0.0, 0.0);
                            for ch in 0..3 {
                                let v = at(ch, t, i, j);
                                let d = diff_t(ch, t, i, j);
                                let (gxv, gyv) = grad(ch, t, i, j);
                                let b = 7 * ch;
                                feat[b] += v;
                                feat[b + 1] += d;
                                feat[b + 2] += d.abs();
                                feat[b + 3] += gxv.abs();
                                feat[b + 4] += gyv.abs();
                                feat[b + 5] += gxv;
                                feat[b + 6] += gyv;
                                gi += v / 3.0;
                                gd += d / 3.0;
                                ggx += gxv / 3.0;
                                ggy += gyv / 3.0;
                            }
                            let (px, py) = (j as f64 + 0.5 - xc, i as f64 + 0.5 - yc);
                            sd_x += gd * px;
                            sd_y += gd * py;
                            sabs += gd.abs();
                            dgx += gd * ggx;
                            dgy += gd * ggy;
                            si += gi;
                            si2 += gi * gi;
                            sdv += gd;
                            sd2 += gd * gd;
                        }
                    }
                }
                for v in feat[..21].iter_mut() {
                    *v /= count;
                }
                if sabs > 0.0 {
                    feat[21] = sd_x / sabs;
                    feat[22] = sd_y / sabs;
                }
                feat[23] = dgx / count;
                feat[24] = dgy / count;
                let mi = si / count;
                feat[25] = (si2 / count - mi * mi).max(0.0);
                let md = sdv / count;
                feat[26] = (sd2 / count - md * md).max(0.0);
                cells.push(feat);
            }
        }
    }
    Ok(cells)
}

/// Physics tokens `[N, Dp]` for a clip; values are rounded to f32 precision.
pub fn toy_physics_extract(frames: &Tensor, cfg: &ModelConfig) -> Result<PhysicsTokens> {
    let cells = raw_features(frames, cfg.phys_grid)?;
    if cells.len() != cfg.phys_tokens {
        return Err(Error::Config {
            field: "phys_grid".into(),
            reason: format!("grid yields {} cells, phys_tokens is {}", cells.len(), cfg.phys_tokens),
        });
    }
    let dp = cfg.phys_dim;
    let mut out = vec![0.0; cells.len() * dp];
    for (row, feat) in out.chunks_mut(dp).zip(&cells) {
        for (k, (o, v)) in row.iter_mut().zip(feat).enumerate() {
            let (centre, scale) = STANDARDIZATION[k];
            *o = ((v - centre) / scale) as f32 as f64;
        }
    }
    let t = Tensor::from_vec(&[cells.len(), dp], out)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("physics features".into()));
    }
    PhysicsTokens::new(t)
}

/// Derives `(centre, scale)` per feature from raw cell statistics. Centred
/// features use mean and standard deviation; the rest use zero and the RMS.
pub fn calibrate<'a>(cells: impl IntoIterator<Item = &'a [f64; FEATURES]>) -> [(f64, f64); FEATURES] {
    let mut n = 0.0;
    let mut s = [0.0; FEATURES];
    let mut s2 = [0.0; FEATURES];
    for c in cells {
        n += 1.0;
        for k in 0..FEATURES {
            s[k] += c[k];
            s2[k] += c[k] * c[k];
        }
    }
    let mut out = [(0.0, 1.0); FEATURES];
    if n == 0.0 {
        return out;
    }
    for k in 0..FEATURES {
        let m2 = s2[k] / n;
        let (centre, var) = if CENTRED.contains(&k) {
            let m = s[k] / n;
            (m, m2 - m * m)
        } else {
            (0.0, m2)
        };
        let scale = libm::sqrt(var.max(0.0));
        out[k] = (centre, if scale > 1e-12 { scale } else { 1.0 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Preset};
    use crate::data::synth::{synth_clip, ClipDims, ClipKind};

    fn toy() -> ModelConfig {
        Config::preset(Preset::Toy).model
    }

    fn reverse(frames: &Tensor) -> Tensor {
        let &[c, nf, h, w] = frames.shape() else { unreachable!() };
        let plane = h * w;
        let mut out = frames.clone();
        for ch in 0..c {
            for t in 0..nf {
                let src = (ch * nf + t) * plane;
                let dst = (ch * nf + nf - 1 - t) * plane;
                out.data_mut()[dst..dst + plane].copy_from_slice(&frames.data()[src..src + plane]);
            }
        }
        out
    }

    #[test]
    fn static_clip_has_zero_temporal_features() {
        let cfg = toy();
        let clip = synth_clip(5, ClipKind::Static, ClipDims::from_config(&cfg));
        let p = toy_physics_extract(&clip.frames, &cfg).unwrap();
        assert_eq!(p.tensor().shape(), &[64, 32]);
        for row in p.tensor().data().chunks(32) {
            for k in TEMPORAL {
                assert_eq!(row[k], 0.0);
            }
        }
    }

    #[test]
    fn time_reversal_negates_signed_temporal_features() {
        let cfg = toy();
        let [gt, gy, gx] = cfg.phys_grid;
        for kind in [ClipKind::Bounce, ClipKind::Collide, ClipKind::Slide] {
            let clip = synth_clip(11, kind, ClipDims::from_config(&cfg));
            let a = raw_features(&clip.frames, cfg.phys_grid).unwrap();
            let b = raw_features(&reverse(&clip.frames), cfg.phys_grid).unwrap();
            let mut nonzero = 0;
            for ct in 0..gt {
                for cell in 0..gy * gx {
                    let fa = &a[ct * gy * gx + cell];
                    let fb = &b[(gt - 1 - ct) * gy * gx + cell];
                    for k in TIME_ODD {
                        assert!((fa[k] + fb[k]).abs() < 1e-12, "{kind:?} feature {k}");
                        nonzero += (fa[k].abs() > 1e-9) as usize;
                    }
                    for k in [0, 2, 3, 25, 26] {
                        assert!((fa[k] - fb[k]).abs() < 1e-12, "{kind:?} feature {k}");
                    }
                }
            }
            assert!(nonzero > 0);
        }
    }

    #[test]
    fn moving_right_has_positive_centroid_shift() {
        // one bright column sweeping right over a dark background
        let (nf, h, w) = (4, 4, 8);
        let mut x = Tensor::full(&[3, nf, h, w], -1.0);
        for ch in 0..3 {
            for t in 0..nf {
                for i in 0..h {
                    x.data_mut()[((ch * nf + t) * h + i) * w + 2 + t] = 1.0;
                }
            }
        }
        let f = raw_features(&x, [1, 1, 1]).unwrap();
        assert!(f[0][21] > 0.0);
        assert!(f[0][22].abs() < 1e-12);
        // brightness constancy: d ≈ −u·∂x so d·∂x < 0 for u > 0
        assert!(f[0][23] < 0.0);
    }

    #[test]
    fn errors() {
        let cfg = toy();
        let one = Tensor::zeros(&[3, 1, 16, 16]);
        assert!(matches!(raw_features(&one, [1, 1, 1]), Err(Error::Invalid(_))));
        let clip = Tensor::zeros(&[3, 8, 16, 16]);
        assert!(matches!(raw_features(&clip, [9, 1, 1]), Err(Error::Config { .. })));
        let mut bad = cfg.clone();
        bad.phys_grid = [2, 4, 4];
        assert!(matches!(toy_physics_extract(&clip, &bad), Err(Error::Config { .. })));
    }

    #[test]
    fn frozen_standardization_matches_calibration_run() {
        let cfg = toy();
        let dims = ClipDims::from_config(&cfg);
        let mut cells = Vec::new();
        for seed in 0..CALIBRATION_CLIPS {
            let clip = synth_clip(seed, ClipKind::for_seed(seed), dims);
            cells.extend(raw_features(&clip.frames, cfg.phys_grid).unwrap());
        }
        let got = calibrate(&cells);
        for k in 0..FEATURES {
            let (c, s) = STANDARDIZATION[k];
            assert!(
                (got[k].0 - c).abs() <= 1e-9 * (1.0 + c.abs()) && (got[k].1 - s).abs() <= 1e-9 * s,
                "feature {k}: calibration gives {:?}, frozen {:?}",
                got[k],
                (c, s)
            );
        }
    }
}

