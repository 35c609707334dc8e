//! Bit-exact training checkpoints.
//!
//! ```text
//! b"PVGK" | version u32 | model fingerprint u64 | step u64 | adam t u64
//! rng: seed [u8; 32] | stream u64 | word_pos u128
//! options: policy u8 | detach u8 | objective u8 | t_max u64
//! config JSON (u32 length + bytes)
//! predictor store | generator store | predictor m, v | generator m, v
//! store/moments: count u32, then per tensor: name | rank u32 | dims u32… | f64 LE…
//! ```
//!
//! Values are stored as f64 so a reload is bitwise identical.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::Config;
use crate::data::shard::{read_shape, read_string, read_u32, read_u64, write_string, ByteSource};
use crate::error::{Error, Result};
use crate::generator::FreezePolicy;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{Moments, Objective, TrainOptions, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PVGK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor_f64(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor_f64<S: ByteSource + ?Sized>(src: &mut S, what: &str) -> Result<Tensor> {
    let shape = read_shape(src, what)?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    src.fill(&mut bytes, what)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn write_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        write_string(out, &p.name);
        write_tensor_f64(out, &p.value);
    }
}

fn read_store<S: ByteSource + ?Sized>(src: &mut S, into: &mut ParamStore, what: &str) -> Result<()> {
    let n = read_u32(src, what)? as usize;
    if n != into.len() {
        return Err(Error::Malformed(format!("{what}: {n} tensors, model has {}", into.len())));
    }
    let mut values = Vec::with_capacity(n);
    for (_, p) in into.iter() {
        let name = read_string(src, what)?;
        if name != p.name {
            return Err(Error::Malformed(format!("{what}: found parameter `{name}` where `{}` was expected", p.name)));
        }
        values.push(read_tensor_f64(src, &name)?);
    }
    into.load_values(&values)
}

fn write_moments(out: &mut Vec<u8>, m: &Moments) {
    for set in [&m.m, &m.v] {
        out.extend_from_slice(&(set.len() as u32).to_le_bytes());
        for t in set {
            write_tensor_f64(out, t);
        }
    }
}

fn read_moments<S: ByteSource + ?Sized>(src: &mut S, into: &mut Moments, what: &str) -> Result<()> {
    for set in [&mut into.m, &mut into.v] {
        let n = read_u32(src, what)? as usize;
        if n != set.len() {
            return Err(Error::Malformed(format!("{what}: {n} moment tensors, model has {}", set.len())));
        }
        for t in set.iter_mut() {
            let v = read_tensor_f64(src, what)?;
            if v.shape() != t.shape() {
                return Err(Error::Shape(format!("{what}: {:?} vs {:?}", v.shape(), t.shape())));
            }
            *t = v;
        }
    }
    Ok(())
}

fn policy_code(p: FreezePolicy) -> u8 {
    match p {
        FreezePolicy::Paper => 0,
        FreezePolicy::PhysicsOnly => 1,
        FreezePolicy::AllTrainable => 2,
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.config.model.fingerprint().to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.optimizer.t.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let (obj, t_max) = match state.options.objective {
        Objective::Joint => (0u8, 0u64),
        Objective::PredictorOnly { t_max } => (1, t_max as u64),
    };
    out.extend_from_slice(&[policy_code(state.options.policy), state.options.detach_physics as u8, obj]);
    out.extend_from_slice(&t_max.to_le_bytes());
    write_string(&mut out, &state.config.to_json_string());
    write_store(&mut out, state.predictor.store());
    write_store(&mut out, state.generator.store());
    write_moments(&mut out, &state.optimizer.predictor);
    write_moments(&mut out, &state.optimizer.generator);
    out
}

/// Restores a state for `config`, whose model section must match the file's fingerprint.
/// Training hyperparameters come from `config`; the stored JSON is informational.
pub fn decode_checkpoint<S: ByteSource + ?Sized>(src: &mut S, config: &Config) -> Result<TrainState> {
    let mut magic = [0u8; 4];
    src.fill(&mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = read_u32(src, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let fp = read_u64(src, "checkpoint fingerprint")?;
    if fp != config.model.fingerprint() {
        return Err(Error::Fingerprint { expected: config.model.fingerprint(), found: fp });
    }
    let step = read_u64(src, "step")?;
    let adam_t = read_u64(src, "optimizer step")?;
    let mut seed = [0u8; 32];
    src.fill(&mut seed, "rng seed")?;
    let stream = read_u64(src, "rng stream")?;
    let mut wp = [0u8; 16];
    src.fill(&mut wp, "rng position")?;
    let mut opts = [0u8; 3];
    src.fill(&mut opts, "training options")?;
    let t_max = read_u64(src, "training options")?;
    let policy = match opts[0] {
        0 => FreezePolicy::Paper,
        1 => FreezePolicy::PhysicsOnly,
        2 => FreezePolicy::AllTrainable,
        x => return Err(Error::Malformed(format!("unknown freeze policy code {x}"))),
    };
    let objective = match opts[2] {
        0 => Objective::Joint,
        1 => Objective::PredictorOnly { t_max: t_max as usize },
        x => return Err(Error::Malformed(format!("unknown objective code {x}"))),
    };
    let options = TrainOptions { policy, detach_physics: opts[1] != 0, objective };
    let _config_json: String = read_string(src, "config")?;

    let mut state = TrainState::new(config, options)?;
    read_store(src, state.predictor.store_mut(), "predictor parameters")?;
    read_store(src, state.generator.store_mut(), "generator parameters")?;
    read_moments(src, &mut state.optimizer.predictor, "predictor moments")?;
    read_moments(src, &mut state.optimizer.generator, "generator moments")?;
    if !src.at_end()? {
        return Err(Error::Malformed("trailing bytes after checkpoint".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from_le_bytes(wp));
    state.rng = rng;
    state.step = step;
    state.optimizer.t = adam_t;
    Ok(state)
}
