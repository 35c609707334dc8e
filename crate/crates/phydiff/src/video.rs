//! Lossless per-frame video container: a directory of binary PPM (P6) files.

use std::fs;
use std::path::{Path, PathBuf};

use phydiff_core::tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::{atomic_write, ensure_dir};

/// 8-bit RGB frames, channel-major `[3, F, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    pub pixels: Vec<u8>,
    pub shape: [usize; 4],
}

impl Video {
    pub fn new(pixels: Vec<u8>, shape: [usize; 4]) -> Result<Self> {
        if shape[0] != 3 || pixels.len() != shape.iter().product::<usize>() {
            return Err(Error::Usage(format!("video of {} bytes does not match shape {shape:?}", pixels.len())));
        }
        Ok(Self { pixels, shape })
    }

    pub fn frames(&self) -> usize {
        self.shape[1]
    }

    /// Pixels mapped back to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|p| *p as f64 / 127.5 - 1.0).collect();
        Tensor::from_vec(&self.shape, data).expect("shape checked at construction")
    }
}

pub fn frame_path(dir: &Path, f: usize) -> PathBuf {
    dir.join(format!("frame_{f:04}.ppm"))
}

pub fn write_video(video: &Video, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let [_, nf, h, w] = video.shape;
    let plane = nf * h * w;
    for f in 0..nf {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.reserve(3 * h * w);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    bytes.push(video.pixels[c * plane + (f * h + i) * w + j]);
                }
            }
        }
        atomic_write(&frame_path(dir, f), &bytes)?;
    }
    Ok(())
}

/// Parses one P6 file with maxval 255; returns `(w, h, rgb)`.
fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let bad = |why: &str| Error::Core(phydiff_core::Error::Malformed(format!("{}: {why}", path.display())));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != 3 * w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", raster.len(), 3 * w * h)));
    }
    Ok((w, h, raster.to_vec()))
}

/// Reads `frame_0000.ppm`, `frame_0001.ppm`, … until the first gap.
pub fn read_video(dir: &Path) -> Result<Video> {
    let mut frames = Vec::new();
    while frame_path(dir, frames.len()).exists() {
        frames.push(read_ppm(&frame_path(dir, frames.len()))?);
    }
    let Some(&(w, h, _)) = frames.first() else {
        return Err(Error::Usage(format!("{}: no frame_0000.ppm found", dir.display())));
    };
    let nf = frames.len();
    let plane = nf * h * w;
    let mut pixels = vec![0u8; 3 * plane];
    for (f, (fw, fh, rgb)) in frames.iter().enumerate() {
        if (*fw, *fh) != (w, h) {
            return Err(Error::Usage(format!("{}: frame {f} is {fw}x{fh}, frame 0 is {w}x{h}", dir.display())));
        }
        for k in 0..h * w {
            for c in 0..3 {
                pixels[c * plane + f * h * w + k] = rgb[3 * k + c];
            }
        }
    }
    Video::new(pixels, [3, nf, h, w])
}
