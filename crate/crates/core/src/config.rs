//! Validated model, diffusion and training configuration, with the two
//! built-in presets.
//!
//! Config files are JSON objects of the form
//! `{"preset": "toy", "model": {..}, "diffusion": {..}, "train": {..}}`.
//! Every section is optional and overrides the named preset field by field;
//! an unknown key anywhere is an error that names the key.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Patch edge used by the generator's latent patch embedding.
pub const GEN_PATCH: usize = 2;
/// Feed-forward expansion factor in every transformer block.
pub const FFN_MULT: usize = 4;
/// Cross-attention blocks in the physics-token decoder.
pub const DECODER_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub phys_tokens: usize,
    pub phys_dim: usize,
    pub hidden_dim: usize,
    pub predictor_layers: usize,
    pub predictor_heads: usize,
    pub gen_spatial_blocks: usize,
    pub gen_temporal_blocks: usize,
    pub gen_heads: usize,
    pub timestep_embed_dim: usize,
    /// Pixel-to-latent spatial factor of the codec.
    pub vae_downsample: usize,
    /// Spatiotemporal grid `[frames, rows, cols]` of the physics tokens; its product is `phys_tokens`.
    pub phys_grid: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_kind: ScheduleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_phys: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Toy => "toy",
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config { field: "preset".into(), reason: format!("unknown preset `{other}`") }),
        }
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                model: ModelConfig {
                    latent_channels: 4,
                    latent_frames: 16,
                    latent_height: 32,
                    latent_width: 32,
                    text_len: 226,
                    text_dim: 4096,
                    phys_tokens: 2048,
                    phys_dim: 1408,
                    hidden_dim: 512,
                    predictor_layers: 4,
                    predictor_heads: 8,
                    gen_spatial_blocks: 14,
                    gen_temporal_blocks: 14,
                    gen_heads: 8,
                    timestep_embed_dim: 256,
                    vae_downsample: 8,
                    phys_grid: [8, 16, 16],
                },
                diffusion: DiffusionConfig {
                    num_timesteps: 1000,
                    beta_start: 1e-4,
                    beta_end: 2e-2,
                    schedule_kind: ScheduleKind::Linear,
                },
                train: TrainConfig {
                    lambda_phys: 0.1,
                    learning_rate: 1e-5,
                    weight_decay: 0.01,
                    batch_size: 1,
                    max_steps: 10_000,
                    seed: 0,
                    checkpoint_every: 1000,
                    log_every: 10,
                },
            },
            Preset::Toy => Self {
                model: ModelConfig {
                    latent_channels: 12,
                    latent_frames: 8,
                    latent_height: 8,
                    latent_width: 8,
                    text_len: 16,
                    text_dim: 64,
                    phys_tokens: 64,
                    phys_dim: 32,
                    hidden_dim: 64,
                    predictor_layers: 2,
                    predictor_heads: 4,
                    gen_spatial_blocks: 1,
                    gen_temporal_blocks: 1,
                    gen_heads: 4,
                    timestep_embed_dim: 32,
                    vae_downsample: 2,
                    phys_grid: [4, 4, 4],
                },
                diffusion: DiffusionConfig {
                    num_timesteps: 50,
                    beta_start: 1e-4,
                    beta_end: 2e-2,
                    schedule_kind: ScheduleKind::Linear,
                },
                train: TrainConfig {
                    lambda_phys: 0.1,
                    learning_rate: 1e-3,
                    weight_decay: 0.01,
                    batch_size: 4,
                    max_steps: 500,
                    seed: 0,
                    checkpoint_every: 100,
                    log_every: 1,
                },
            },
        }
    }

    /// Parses a JSON config document (see module docs) and validates it.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let Value::Object(mut root) = doc else {
            return Err(Error::ConfigParse("top level must be an object".into()));
        };
        let preset = match root.remove("preset") {
            None => Preset::Toy,
            Some(Value::String(s)) => s.parse()?,
            Some(_) => {
                return Err(Error::Config { field: "preset".into(), reason: "must be a string".into() })
            }
        };
        let base = Self::preset(preset);
        let mut merged = Map::new();
        for (section, base_value) in [
            ("model", to_value(&base.model)?),
            ("diffusion", to_value(&base.diffusion)?),
            ("train", to_value(&base.train)?),
        ] {
            let over = root.remove(section);
            merged.insert(section.into(), merge_section(section, base_value, over)?);
        }
        if let Some(k) = root.keys().next() {
            return Err(Error::Config { field: k.clone(), reason: "unknown key".into() });
        }
        let cfg: Config = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the full configuration; `from_json_str` reproduces it exactly.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.validate()?;
        self.train.validate()
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::ConfigParse(e.to_string()))
}

fn merge_section(section: &str, base: Value, over: Option<Value>) -> Result<Value> {
    let Value::Object(mut base) = base else { unreachable!("sections serialize as objects") };
    match over {
        None => {}
        Some(Value::Object(over)) => {
            for (k, v) in over {
                if !base.contains_key(&k) {
                    return Err(Error::Config { field: format!("{section}.{k}"), reason: "unknown key".into() });
                }
                base.insert(k, v);
            }
        }
        Some(_) => {
            return Err(Error::Config { field: section.into(), reason: "must be an object".into() });
        }
    }
    Ok(Value::Object(base))
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

impl ModelConfig {
    fn counts(&self) -> [(&'static str, usize); 17] {
        [
            ("latent_channels", self.latent_channels),
            ("latent_frames", self.latent_frames),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("text_len", self.text_len),
            ("text_dim", self.text_dim),
            ("phys_tokens", self.phys_tokens),
            ("phys_dim", self.phys_dim),
            ("hidden_dim", self.hidden_dim),
            ("predictor_layers", self.predictor_layers),
            ("predictor_heads", self.predictor_heads),
            ("gen_spatial_blocks", self.gen_spatial_blocks),
            ("gen_temporal_blocks", self.gen_temporal_blocks),
            ("gen_heads", self.gen_heads),
            ("timestep_embed_dim", self.timestep_embed_dim),
            ("vae_downsample", self.vae_downsample),
            ("phys_grid", self.phys_grid.iter().product()),
        ]
    }

    /// Hard invariants; the first violation is returned naming its field.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.counts() {
            if v == 0 {
                return Err(bad(name, "must be at least 1"));
            }
        }
        for (name, v) in [
            ("latent_frames", self.latent_frames),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
        ] {
            if v % 2 != 0 {
                return Err(bad(name, format!("{v} is odd; the latent encoder halves this axis")));
            }
        }
        for (name, heads) in [("predictor_heads", self.predictor_heads), ("gen_heads", self.gen_heads)] {
            if self.hidden_dim % heads != 0 {
                return Err(bad(name, format!("hidden_dim {} is not divisible by {heads}", self.hidden_dim)));
            }
        }
        if self.timestep_embed_dim % 2 != 0 {
            return Err(bad("timestep_embed_dim", "must be even"));
        }
        if self.phys_grid.iter().product::<usize>() != self.phys_tokens {
            return Err(bad("phys_grid", format!("{:?} does not multiply to phys_tokens {}", self.phys_grid, self.phys_tokens)));
        }
        Ok(())
    }

    /// Cross-field diagnostics; empty iff every constraint holds.
    pub fn validate_shapes(&self) -> Vec<String> {
        let mut w = Vec::new();
        for (name, v) in self.counts() {
            if v == 0 {
                w.push(format!("{name} is 0; every count must be at least 1"));
            }
        }
        for (name, v) in [
            ("latent_frames", self.latent_frames),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
        ] {
            if v % 2 != 0 {
                w.push(format!("{name}={v} is odd, but the predictor's latent encoder halves it"));
            }
        }
        for (name, heads) in [("predictor_heads", self.predictor_heads), ("gen_heads", self.gen_heads)] {
            if heads == 0 || self.hidden_dim % heads != 0 {
                w.push(format!("hidden_dim={} is not divisible by {name}={heads}", self.hidden_dim));
            }
        }
        if self.latent_height % GEN_PATCH != 0 || self.latent_width % GEN_PATCH != 0 {
            w.push(format!("latent spatial dims are not divisible by the {GEN_PATCH}x{GEN_PATCH} generator patch"));
        }
        if self.timestep_embed_dim % 2 != 0 {
            w.push(format!("timestep_embed_dim={} is odd; the sinusoidal embedding needs an even width", self.timestep_embed_dim));
        }
        if self.phys_grid.iter().product::<usize>() != self.phys_tokens {
            w.push(format!("phys_grid {:?} does not multiply to phys_tokens={}", self.phys_grid, self.phys_tokens));
        }
        w
    }

    /// Whether the built-in exactly invertible codec can produce these latents.
    pub fn codec_compatible(&self) -> bool {
        self.latent_channels == 3 * self.vae_downsample * self.vae_downsample
    }

    pub fn pixel_height(&self) -> usize {
        self.latent_height * self.vae_downsample
    }

    pub fn pixel_width(&self) -> usize {
        self.latent_width * self.vae_downsample
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.latent_channels, self.latent_frames, self.latent_height, self.latent_width]
    }

    /// Stable 64-bit digest of every field; guards shards and checkpoints against config drift.
    pub fn fingerprint(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_timesteps == 0 {
            return Err(bad("num_timesteps", "must be at least 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(bad("beta_start", format!("{} not in (0, 1)", self.beta_start)));
        }
        if !(self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(bad("beta_end", format!("{} not in [beta_start, 1)", self.beta_end)));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_phys >= 0.0 && self.lambda_phys.is_finite()) {
            return Err(bad("lambda_phys", "must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", "must be finite and non-negative"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(bad(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}
