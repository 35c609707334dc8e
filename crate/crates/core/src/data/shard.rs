//! Binary cache of training samples.
//!
//! ```text
//! header: b"PVGC" | version u32 | config fingerprint u64 | count u64
//! record: id_len u32 | id bytes | z0 | c_text | p_gt | prompt_len u32 | prompt bytes
//! tensor: rank u32 | dims u32 × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian. Readers pull bytes through
//! [`ByteSource`] so the same decoder serves slices and buffered files.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::data::TrainingSample;
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::predictor::{PhysicsTokens, TextEmbedding};
use crate::tensor::Tensor;

pub const SHARD_MAGIC: [u8; 4] = *b"PVGC";
pub const SHARD_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
/// Sanity bound on tensor rank and string lengths read from disk.
const MAX_RANK: usize = 8;
const MAX_STRING: usize = 1 << 20;

/// Supplies exactly the requested bytes or reports truncation.
pub trait ByteSource {
    /// Fills `buf` completely; `what` names the field for error messages.
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()>;

    /// True when no bytes remain.
    fn at_end(&mut self) -> Result<bool>;
}

impl ByteSource for &[u8] {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        if self.len() < buf.len() {
            return Err(Error::Truncated(format!("{what}: need {} bytes, {} left", buf.len(), self.len())));
        }
        let (head, tail) = self.split_at(buf.len());
        buf.copy_from_slice(head);
        *self = tail;
        Ok(())
    }

    fn at_end(&mut self) -> Result<bool> {
        Ok(self.is_empty())
    }
}

pub(crate) fn read_u32<S: ByteSource + ?Sized>(src: &mut S, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    src.fill(&mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<S: ByteSource + ?Sized>(src: &mut S, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    src.fill(&mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_string<S: ByteSource + ?Sized>(src: &mut S, what: &str) -> Result<String> {
    let n = read_u32(src, what)? as usize;
    if n > MAX_STRING {
        return Err(Error::Malformed(format!("{what}: length {n} exceeds {MAX_STRING}")));
    }
    let mut b = vec![0u8; n];
    src.fill(&mut b, what)?;
    String::from_utf8(b).map_err(|_| Error::Malformed(format!("{what}: not UTF-8")))
}

pub(crate) fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Writes a tensor as f32. Values not exactly representable are rounded.
pub fn write_tensor_f32(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn read_tensor_f32<S: ByteSource + ?Sized>(src: &mut S, what: &str) -> Result<Tensor> {
    let shape = read_shape(src, what)?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    src.fill(&mut bytes, what)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::from_vec(&shape, data)
}

pub(crate) fn read_shape<S: ByteSource + ?Sized>(src: &mut S, what: &str) -> Result<Vec<usize>> {
    let rank = read_u32(src, what)? as usize;
    if rank > MAX_RANK {
        return Err(Error::Malformed(format!("{what}: rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(src, what)? as usize);
    }
    if shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).is_none_or(|n| n > (1 << 31)) {
        return Err(Error::Malformed(format!("{what}: implausible shape {shape:?}")));
    }
    Ok(shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub fingerprint: u64,
    pub count: u64,
}

impl ShardHeader {
    pub fn new(cfg: &ModelConfig, count: u64) -> Self {
        Self { version: SHARD_VERSION, fingerprint: cfg.fingerprint(), count }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&SHARD_MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..16].copy_from_slice(&self.fingerprint.to_le_bytes());
        b[16..24].copy_from_slice(&self.count.to_le_bytes());
        b
    }

    /// Reads and validates a header against the consuming config.
    pub fn read<S: ByteSource + ?Sized>(src: &mut S, cfg: &ModelConfig) -> Result<Self> {
        let mut magic = [0u8; 4];
        src.fill(&mut magic, "shard magic")?;
        if magic != SHARD_MAGIC {
            return Err(Error::BadMagic { expected: SHARD_MAGIC, found: magic });
        }
        let version = read_u32(src, "shard version")?;
        if version != SHARD_VERSION {
            return Err(Error::Version { expected: SHARD_VERSION, found: version });
        }
        let fingerprint = read_u64(src, "shard fingerprint")?;
        if fingerprint != cfg.fingerprint() {
            return Err(Error::Fingerprint { expected: cfg.fingerprint(), found: fingerprint });
        }
        let count = read_u64(src, "shard count")?;
        Ok(Self { version, fingerprint, count })
    }
}

pub fn encode_record(out: &mut Vec<u8>, s: &TrainingSample) {
    write_string(out, &s.sample_id);
    write_tensor_f32(out, s.z0.tensor());
    write_tensor_f32(out, s.c_text.tensor());
    write_tensor_f32(out, s.p_gt.tensor());
    write_string(out, &s.prompt);
}

pub fn decode_record<S: ByteSource + ?Sized>(src: &mut S, cfg: &ModelConfig) -> Result<TrainingSample> {
    let sample_id = read_string(src, "sample id")?;
    let z0 = LatentVideo::new(read_tensor_f32(src, "z0")?)?;
    let c_text = TextEmbedding::new(read_tensor_f32(src, "c_text")?)?;
    let p_gt = PhysicsTokens::new(read_tensor_f32(src, "p_gt")?)?;
    let prompt = read_string(src, "prompt")?;
    let s = TrainingSample { z0, c_text, p_gt, prompt, sample_id };
    s.check(cfg)?;
    Ok(s)
}

/// Whole shard in memory.
pub fn encode_shard<'a>(cfg: &ModelConfig, samples: impl IntoIterator<Item = &'a TrainingSample>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut n = 0u64;
    for s in samples {
        encode_record(&mut body, s);
        n += 1;
    }
    let mut out = ShardHeader::new(cfg, n).encode().to_vec();
    out.extend_from_slice(&body);
    out
}

/// Decodes records lazily after validating the header.
pub struct ShardReader<S> {
    src: S,
    cfg: ModelConfig,
    remaining: u64,
    header: ShardHeader,
    done: bool,
}

impl<S: ByteSource> ShardReader<S> {
    pub fn new(mut src: S, cfg: &ModelConfig) -> Result<Self> {
        let header = ShardHeader::read(&mut src, cfg)?;
        Ok(Self { src, cfg: cfg.clone(), remaining: header.count, header, done: false })
    }

    pub fn header(&self) -> ShardHeader {
        self.header
    }
}

impl<S: ByteSource> Iterator for ShardReader<S> {
    type Item = Result<TrainingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.remaining == 0 {
            self.done = true;
            return match self.src.at_end() {
                Ok(true) => None,
                Ok(false) => Some(Err(Error::Malformed("trailing bytes after the last record".into()))),
                Err(e) => Some(Err(e)),
            };
        }
        self.remaining -= 1;
        let r = decode_record(&mut self.src, &self.cfg);
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}
