//! Temporal-quality metrics over decoded videos.
//!
//! Videos are `[C, F, H, W]` tensors (any value range). Each metric has a
//! plugin seam — [`FlowEstimator`], [`FrameEmbedder`], [`FeatureExtractor`] —
//! and a deterministic built-in implementation. Flow statistics aggregate
//! over space by the mean.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One grey-level frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("frame data {} vs {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    fn at(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.h as isize - 1) as usize;
        let j = j.clamp(0, self.w as isize - 1) as usize;
        self.data[i * self.w + j]
    }

    /// Bilinear sample with border clamping.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (libm::floor(y), libm::floor(x));
        let (fy, fx) = (y - y0, x - x0);
        let (i, j) = (y0 as isize, x0 as isize);
        let top = self.at(i, j) * (1.0 - fx) + self.at(i, j + 1) * fx;
        let bot = self.at(i + 1, j) * (1.0 - fx) + self.at(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Zero mean and unit variance (only centred when flat).
    fn standardized(&self) -> Frame {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = if var > 1e-24 { 1.0 / libm::sqrt(var) } else { 1.0 };
        Frame { h: self.h, w: self.w, data: self.data.iter().map(|v| (v - mean) * s).collect() }
    }

    /// 2×2 average pooling (odd trailing row/column dropped).
    fn half(&self) -> Frame {
        let (h, w) = ((self.h / 2).max(1), (self.w / 2).max(1));
        let mut data = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (a, b) = (2 * i as isize, 2 * j as isize);
                data[i * w + j] = 0.25 * (self.at(a, b) + self.at(a, b + 1) + self.at(a + 1, b) + self.at(a + 1, b + 1));
            }
        }
        Frame { h, w, data }
    }

    /// Separable [1 2 1]/4 blur.
    fn blur(&self) -> Frame {
        let mut tmp = vec![0.0; self.data.len()];
        for i in 0..self.h {
            for j in 0..self.w {
                let (i, j) = (i as isize, j as isize);
                tmp[i as usize * self.w + j as usize] =
                    0.25 * self.at(i, j - 1) + 0.5 * self.at(i, j) + 0.25 * self.at(i, j + 1);
            }
        }
        let t = Frame { h: self.h, w: self.w, data: tmp };
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.h {
            for j in 0..self.w {
                let (i, j) = (i as isize, j as isize);
                out[i as usize * self.w + j as usize] = 0.25 * t.at(i - 1, j) + 0.5 * t.at(i, j) + 0.25 * t.at(i + 1, j);
            }
        }
        Frame { h: self.h, w: self.w, data: out }
    }

    /// Central-difference gradients with clamped borders.
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; self.data.len()];
        let mut gy = vec![0.0; self.data.len()];
        for i in 0..self.h {
            for j in 0..self.w {
                let (ii, jj) = (i as isize, j as isize);
                gx[i * self.w + j] = 0.5 * (self.at(ii, jj + 1) - self.at(ii, jj - 1));
                gy[i * self.w + j] = 0.5 * (self.at(ii + 1, jj) - self.at(ii - 1, jj));
            }
        }
        (gx, gy)
    }
}

/// Per-channel planes of frame `f`.
fn frame_channels(video: &Tensor, f: usize) -> Vec<Frame> {
    let s = video.shape();
    let (c, nf, h, w) = (s[0], s[1], s[2], s[3]);
    (0..c)
        .map(|ch| {
            let base = (ch * nf + f) * h * w;
            Frame { h, w, data: video.data()[base..base + h * w].to_vec() }
        })
        .collect()
}

fn grey(video: &Tensor, f: usize) -> Frame {
    let chans = frame_channels(video, f);
    let n = chans.len() as f64;
    let mut g = chans[0].clone();
    for v in g.data.iter_mut() {
        *v = 0.0;
    }
    for c in &chans {
        for (o, v) in g.data.iter_mut().zip(&c.data) {
            *o += v / n;
        }
    }
    g
}

fn check_video(video: &Tensor, min_frames: usize, what: &str) -> Result<usize> {
    let s = video.shape();
    if s.len() != 4 || s[0] == 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!("{what}: video must be [C, F, H, W], got {s:?}")));
    }
    if s[1] < min_frames {
        return Err(Error::Invalid(format!("{what} needs at least {min_frames} frames, got {}", s[1])));
    }
    if !video.is_finite() {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(s[1])
}

/// Dense flow in px/frame from frame a to frame b.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, u: vec![0.0; h * w], v: vec![0.0; h * w] }
    }

    pub fn mean_u(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.u.len().max(1) as f64
    }

    pub fn mean_v(&self) -> f64 {
        self.v.iter().sum::<f64>() / self.v.len().max(1) as f64
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.u.iter().zip(&self.v).map(|(u, v)| libm::hypot(*u, *v)).sum::<f64>() / self.u.len().max(1) as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Doubles resolution and magnitude (nearest neighbour), cropped or padded to `h × w`.
    fn upsample(&self, h: usize, w: usize) -> Self {
        let mut out = Self::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = ((i / 2).min(self.h - 1), (j / 2).min(self.w - 1));
                out.u[i * w + j] = 2.0 * self.u[si * self.w + sj];
                out.v[i * w + j] = 2.0 * self.v[si * self.w + sj];
            }
        }
        out
    }
}

pub trait FlowEstimator {
    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField>;
}

/// Coarse-to-fine warped Lucas–Kanade with a smoothness pull toward the
/// neighbourhood mean. Frames are standardized first, so the estimate is
/// unchanged by a global brightness offset or gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFlow {
    pub levels: usize,
    pub iterations: usize,
    pub smoothness: f64,
    pub window_radius: usize,
    /// Per-iteration update clamp in pixels of the current level.
    pub max_step: f64,
}

impl Default for GradientFlow {
    fn default() -> Self {
        Self { levels: 2, iterations: 10, smoothness: 2.0, window_radius: 2, max_step: 0.5 }
    }
}

impl GradientFlow {
    fn refine(&self, a: &Frame, b: &Frame, mut flow: FlowField) -> FlowField {
        let (h, w) = (a.h, a.w);
        let r = self.window_radius as isize;
        for _ in 0..self.iterations {
            let mut warped = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    warped[k] = b.sample(i as f64 + flow.v[k], j as f64 + flow.u[k]);
                }
            }
            let bw = Frame { h, w, data: warped };
            let (ax, ay) = a.gradients();
            let (bx, by) = bw.gradients();
            let ix: Vec<f64> = ax.iter().zip(&bx).map(|(p, q)| 0.5 * (p + q)).collect();
            let iy: Vec<f64> = ay.iter().zip(&by).map(|(p, q)| 0.5 * (p + q)).collect();
            let it: Vec<f64> = bw.data.iter().zip(&a.data).map(|(p, q)| p - q).collect();
            let prev = flow.clone();
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    let (mut au, mut av, mut an) = (0.0, 0.0, 0.0);
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, x) = (i + di, j + dj);
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            let k = y as usize * w + x as usize;
                            sxx += ix[k] * ix[k];
                            sxy += ix[k] * iy[k];
                            syy += iy[k] * iy[k];
                            sxt += ix[k] * it[k];
                            syt += iy[k] * it[k];
                            au += prev.u[k];
                            av += prev.v[k];
                            an += 1.0;
                        }
                    }
                    let k = i as usize * w + j as usize;
                    let al = self.smoothness;
                    let (pu, pv) = (au / an - prev.u[k], av / an - prev.v[k]);
                    let (a11, a12, a22) = (sxx + al, sxy, syy + al);
                    let (b1, b2) = (-sxt + al * pu, -syt + al * pv);
                    let det = a11 * a22 - a12 * a12;
                    if det.abs() < 1e-300 {
                        continue;
                    }
                    let step = self.max_step;
                    flow.u[k] = prev.u[k] + ((a22 * b1 - a12 * b2) / det).clamp(-step, step);
                    flow.v[k] = prev.v[k] + ((a11 * b2 - a12 * b1) / det).clamp(-step, step);
                }
            }
        }
        flow
    }
}

impl FlowEstimator for GradientFlow {
    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        if a.h != b.h || a.w != b.w {
            return Err(Error::Shape(format!("flow frames {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
        }
        let (a, b) = (a.standardized(), b.standardized());
        let mut pyr = vec![(a, b)];
        for _ in 1..self.levels.max(1) {
            let (pa, pb) = pyr.last().expect("non-empty");
            if pa.h < 4 || pa.w < 4 {
                break;
            }
            let next = (pa.half(), pb.half());
            pyr.push(next);
        }
        let (ca, _) = pyr.last().expect("non-empty");
        let mut flow = FlowField::zeros(ca.h, ca.w);
        for (lvl, (pa, pb)) in pyr.iter().enumerate().rev() {
            if lvl + 1 < pyr.len() {
                flow = flow.upsample(pa.h, pa.w);
            }
            flow = self.refine(pa, pb, flow);
        }
        Ok(flow)
    }
}

/// Grey-level flow between frames `f` and `f + 1` of a video.
pub fn estimate_flow(video: &Tensor, f: usize, estimator: &dyn FlowEstimator) -> Result<FlowField> {
    let nf = check_video(video, 2, "estimate_flow")?;
    if f + 1 >= nf {
        return Err(Error::Invalid(format!("no frame pair at {f} in a {nf}-frame video")));
    }
    estimator.estimate(&grey(video, f), &grey(video, f + 1))
}

/// Per-pair mean flow magnitude, and the series' mean and population std.
pub fn flow_consistency(video: &Tensor, estimator: &dyn FlowEstimator) -> Result<(f64, f64, Vec<f64>)> {
    let nf = check_video(video, 3, "flow_consistency")?;
    let mut series = Vec::with_capacity(nf - 1);
    for f in 0..nf - 1 {
        series.push(estimator.estimate(&grey(video, f), &grey(video, f + 1))?.mean_magnitude());
    }
    let (mean, std) = mean_std(&series);
    Ok((mean, std, series))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(v))
}

/// Maps one frame (all channels) to a fixed-width vector.
pub trait FrameEmbedder {
    fn embed(&self, channels: &[Frame]) -> Result<Vec<f64>>;
}

/// Multi-scale spatial-pyramid histogram of grey intensity and gradient
/// magnitude. Scale `s` pools the frame `s` times and splits it into a
/// `2^(scales−1−s)` square grid of cells, each with its own soft-binned
/// histogram, so both global tone and local layout contribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramEmbedder {
    pub scales: usize,
    pub intensity_bins: usize,
    pub gradient_bins: usize,
    /// Intensity range covered by the histogram; values outside are clamped.
    pub range: (f64, f64),
}

impl Default for HistogramEmbedder {
    fn default() -> Self {
        Self { scales: 3, intensity_bins: 16, gradient_bins: 8, range: (-1.0, 1.0) }
    }
}

/// Adds `weight` to `hist` at fractional position `t ∈ [0, 1]`, split linearly
/// between the two nearest bin centres.
fn soft_bin(hist: &mut [f64], t: f64, weight: f64) {
    let n = hist.len();
    let x = (t.clamp(0.0, 1.0) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i = libm::floor(x) as usize;
    let f = x - i as f64;
    hist[i] += weight * (1.0 - f);
    if i + 1 < n {
        hist[i + 1] += weight * f;
    }
}

impl FrameEmbedder for HistogramEmbedder {
    fn embed(&self, channels: &[Frame]) -> Result<Vec<f64>> {
        let first = channels.first().ok_or_else(|| Error::Invalid("frame has no channels".into()))?;
        let n = channels.len() as f64;
        let mut g = Frame { h: first.h, w: first.w, data: vec![0.0; first.data.len()] };
        for c in channels {
            for (o, v) in g.data.iter_mut().zip(&c.data) {
                *o += v / n;
            }
        }
        let (lo, hi) = self.range;
        let (nb_i, nb_g) = (self.intensity_bins, self.gradient_bins);
        let mut out = Vec::new();
        for s in 0..self.scales {
            let cells = (1usize << (self.scales - 1 - s)).min(g.h).min(g.w);
            let mut hist = vec![0.0; cells * cells * (nb_i + nb_g)];
            let (gx, gy) = g.gradients();
            for i in 0..g.h {
                for j in 0..g.w {
                    let k = i * g.w + j;
                    let cell = (i * cells / g.h) * cells + j * cells / g.w;
                    let area = ((g.h / cells) * (g.w / cells)).max(1) as f64;
                    let base = cell * (nb_i + nb_g);
                    soft_bin(&mut hist[base..base + nb_i], (g.data[k] - lo) / (hi - lo), 1.0 / area);
                    let m = libm::hypot(gx[k], gy[k]) / (hi - lo);
                    soft_bin(&mut hist[base + nb_i..base + nb_i + nb_g], m, 1.0 / area);
                }
            }
            out.extend(hist);
            if g.h < 2 || g.w < 2 {
                break;
            }
            g = g.half();
        }
        Ok(out)
    }
}

/// Mean cosine similarity of consecutive frame embeddings, with the per-pair series.
pub fn embed_consistency(video: &Tensor, embedder: &dyn FrameEmbedder) -> Result<(f64, Vec<f64>)> {
    let nf = check_video(video, 2, "embed_consistency")?;
    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut series = Vec::with_capacity(nf - 1);
    for f in 0..nf {
        let e = embedder.embed(&frame_channels(video, f))?;
        let norm = libm::sqrt(e.iter().map(|x| x * x).sum::<f64>());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Invalid(format!("frame {f} embeds to a zero or non-finite vector")));
        }
        if let Some((p, pn)) = &prev {
            if p.len() != e.len() {
                return Err(Error::Shape(format!("frame {f} embedding width {} vs {}", e.len(), p.len())));
            }
            let dot: f64 = p.iter().zip(&e).map(|(a, b)| a * b).sum();
            series.push((dot / (pn * norm)).clamp(-1.0, 1.0));
        }
        prev = Some((e, norm));
    }
    Ok((series.iter().sum::<f64>() / series.len() as f64, series))
}

/// Maps one frame to a stack of feature layers.
pub trait FeatureExtractor {
    fn features(&self, channels: &[Frame]) -> Result<Vec<Vec<f64>>>;
}

/// Per channel and scale: gradients of the blurred image, then 2× pooling
/// before the next scale. Gradient features ignore constant offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlurGradientFeatures {
    pub scales: usize,
}

impl Default for BlurGradientFeatures {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

impl FeatureExtractor for BlurGradientFeatures {
    fn features(&self, channels: &[Frame]) -> Result<Vec<Vec<f64>>> {
        let mut layers = vec![Vec::new(); self.scales];
        for c in channels {
            let mut img = c.clone();
            for layer in layers.iter_mut() {
                let b = img.blur();
                let (gx, gy) = b.gradients();
                layer.extend(gx);
                layer.extend(gy);
                img = b.half();
            }
        }
        Ok(layers)
    }
}

/// Sum over layers of the RMS feature difference.
pub fn feature_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature stacks of {} and {} layers", a.len(), b.len())));
    }
    let mut d = 0.0;
    for (la, lb) in a.iter().zip(b) {
        if la.len() != lb.len() {
            return Err(Error::Shape(format!("feature layer widths {} vs {}", la.len(), lb.len())));
        }
        let n = la.len().max(1) as f64;
        d += libm::sqrt(la.iter().zip(lb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n);
    }
    Ok(d)
}

/// Mean feature distance between consecutive frames, with the per-pair series.
pub fn t_lpips(video: &Tensor, extractor: &dyn FeatureExtractor) -> Result<(f64, Vec<f64>)> {
    let nf = check_video(video, 2, "t_lpips")?;
    let mut prev = extractor.features(&frame_channels(video, 0))?;
    let mut series = Vec::with_capacity(nf - 1);
    for f in 1..nf {
        let cur = extractor.features(&frame_channels(video, f))?;
        series.push(feature_distance(&prev, &cur)?);
        prev = cur;
    }
    Ok((series.iter().sum::<f64>() / series.len() as f64, series))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub flow: bool,
    pub embed: bool,
    pub tlpips: bool,
}

impl MetricSelection {
    pub const ALL: Self = Self { flow: true, embed: true, tlpips: true };
}

impl core::str::FromStr for MetricSelection {
    type Err = Error;

    /// Comma-separated subset of `flow,embed,tlpips`.
    fn from_str(s: &str) -> Result<Self> {
        let mut sel = Self { flow: false, embed: false, tlpips: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "flow" => sel.flow = true,
                "embed" => sel.embed = true,
                "tlpips" => sel.tlpips = true,
                other => return Err(Error::Invalid(format!("unknown metric `{other}` (expected flow, embed, tlpips)"))),
            }
        }
        if !(sel.flow || sel.embed || sel.tlpips) {
            return Err(Error::Invalid("no metrics selected".into()));
        }
        Ok(sel)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub flow_mean_magnitude: Option<f64>,
    pub flow_temporal_std: Option<f64>,
    pub embed_consistency: Option<f64>,
    pub tlpips_mean: Option<f64>,
    pub flow_series: Vec<f64>,
    pub embed_series: Vec<f64>,
    pub tlpips_series: Vec<f64>,
}

/// The plugin set used by [`evaluate`].
pub struct Plugins {
    pub flow: Box<dyn FlowEstimator>,
    pub embed: Box<dyn FrameEmbedder>,
    pub features: Box<dyn FeatureExtractor>,
}

impl Default for Plugins {
    fn default() -> Self {
        Self {
            flow: Box::new(GradientFlow::default()),
            embed: Box::new(HistogramEmbedder::default()),
            features: Box::new(BlurGradientFeatures::default()),
        }
    }
}

pub fn evaluate(video: &Tensor, sel: MetricSelection, plugins: &Plugins) -> Result<MetricReport> {
    let mut r = MetricReport::default();
    if sel.flow {
        let (m, s, series) = flow_consistency(video, plugins.flow.as_ref())?;
        r.flow_mean_magnitude = Some(m);
        r.flow_temporal_std = Some(s);
        r.flow_series = series;
    }
    if sel.embed {
        let (m, series) = embed_consistency(video, plugins.embed.as_ref())?;
        r.embed_consistency = Some(m);
        r.embed_series = series;
    }
    if sel.tlpips {
        let (m, series) = t_lpips(video, plugins.features.as_ref())?;
        r.tlpips_mean = Some(m);
        r.tlpips_series = series;
    }
    Ok(r)
}

/// `(mean, population std)` of one metric over the reports that have it.
pub fn aggregate(reports: &[MetricReport], pick: impl Fn(&MetricReport) -> Option<f64>) -> Option<(f64, f64)> {
    let xs: Vec<f64> = reports.iter().filter_map(pick).collect();
    (!xs.is_empty()).then(|| mean_std(&xs))
}
