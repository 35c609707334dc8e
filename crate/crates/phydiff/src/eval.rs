//! Corpus evaluation: one JSON row per video plus a summary row.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use phydiff_core::data::ToyVae;
use phydiff_core::diffusion::NoiseSchedule;
use phydiff_core::generator::Generator;
use phydiff_core::inference::{generate, GenerationRequest, Guidance};
use phydiff_core::metrics::{aggregate, evaluate, MetricReport, MetricSelection, Plugins};
use phydiff_core::predictor::Predictor;
use phydiff_core::tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::video::{read_video, Video};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub video: String,
    /// Generation seed; A/B rows with the same seed form a pair.
    pub seed: Option<u64>,
    pub physics: Option<&'static str>,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub error: Option<String>,
    /// Reserved for external physical-commonsense scores; never filled here.
    pub videophy_sa: Option<f64>,
    pub videophy_pc: Option<f64>,
}

impl EvalRow {
    fn new(video: String, seed: Option<u64>, physics: Option<&'static str>, r: Result<MetricReport>) -> Self {
        let (metrics, error) = match r {
            Ok(m) => (m, None),
            Err(e) => (MetricReport::default(), Some(e.to_string())),
        };
        Self { video, seed, physics, metrics, error, videophy_sa: None, videophy_pc: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub summary: bool,
    pub videos: usize,
    pub failed: usize,
    pub flow_mean_magnitude: Option<MeanStd>,
    pub flow_temporal_std: Option<MeanStd>,
    pub embed_consistency: Option<MeanStd>,
    pub tlpips_mean: Option<MeanStd>,
}

pub fn summarize(rows: &[EvalRow]) -> Summary {
    let reports: Vec<MetricReport> = rows.iter().filter(|r| r.error.is_none()).map(|r| r.metrics.clone()).collect();
    let ms = |f: fn(&MetricReport) -> Option<f64>| aggregate(&reports, f).map(|(mean, std)| MeanStd { mean, std });
    Summary {
        summary: true,
        videos: rows.len(),
        failed: rows.iter().filter(|r| r.error.is_some()).count(),
        flow_mean_magnitude: ms(|r| r.flow_mean_magnitude),
        flow_temporal_std: ms(|r| r.flow_temporal_std),
        embed_consistency: ms(|r| r.embed_consistency),
        tlpips_mean: ms(|r| r.tlpips_mean),
    }
}

/// Video directories directly under `root`, sorted by name. A `root` that
/// itself holds frames counts as a single video.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    if crate::video::frame_path(root, 0).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let p = entry.map_err(Error::io(root))?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn eval_tensor(t: &Tensor, sel: MetricSelection, plugins: &Plugins) -> Result<MetricReport> {
    Ok(evaluate(t, sel, plugins)?)
}

/// Evaluates every video under `root`; failures become rows with `error` set.
pub fn eval_corpus(root: &Path, sel: MetricSelection, plugins: &Plugins) -> Result<Vec<EvalRow>> {
    Ok(list_videos(root)?
        .into_iter()
        .map(|dir| {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let r = read_video(&dir).and_then(|v| eval_tensor(&v.to_tensor(), sel, plugins));
            EvalRow::new(name, None, None, r)
        })
        .collect())
}

/// Generates physics-on and physics-off videos for each seed and evaluates both;
/// rows come in on/off pairs sharing a seed.
#[allow(clippy::too_many_arguments)]
pub fn eval_ab(
    prompt: &str,
    seeds: impl IntoIterator<Item = u64>,
    num_steps: usize,
    predictor: &Predictor,
    generator: &Generator,
    sched: &NoiseSchedule,
    vae: &ToyVae,
    sel: MetricSelection,
    plugins: &Plugins,
) -> Vec<EvalRow> {
    let mut rows = Vec::new();
    for seed in seeds {
        for (g, tag) in [(Guidance::PhysicsOn, "on"), (Guidance::PhysicsOff, "off")] {
            let req = GenerationRequest { prompt: prompt.to_owned(), num_steps, seed, guidance: g };
            let r = generate(&req, predictor, generator, sched, vae)
                .map_err(Error::from)
                .and_then(|v| Video::new(v.frames, v.shape))
                .and_then(|v| eval_tensor(&v.to_tensor(), sel, plugins));
            rows.push(EvalRow::new(format!("seed-{seed}-physics-{tag}"), Some(seed), Some(tag), r));
        }
    }
    rows
}

/// JSON lines: one per row, then the summary.
pub fn write_report(path: &Path, rows: &[EvalRow]) -> Result<Summary> {
    let summary = summarize(rows);
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Usage(e.to_string()))?;
        out.push(b'\n');
    }
    serde_json::to_writer(&mut out, &summary).map_err(|e| Error::Usage(e.to_string()))?;
    writeln!(out).map_err(Error::io(path))?;
    atomic_write(path, &out)?;
    Ok(summary)
}
