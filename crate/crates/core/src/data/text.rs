//! Hash-keyed bag-of-tokens text encoder.

use alloc::vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::predictor::TextEmbedding;
use crate::tensor::Tensor;

/// Whitespace tokens, truncated or zero-padded to `len` rows of width `dim`.
/// Each token maps to a fixed pseudo-random unit vector keyed by SHA-256 of
/// its bytes, so embeddings are stable across platforms and runs.
pub fn toy_text_embed(prompt: &str, len: usize, dim: usize) -> TextEmbedding {
    let mut data = vec![0.0; len * dim];
    for (row, tok) in data.chunks_mut(dim.max(1)).zip(prompt.split_whitespace()) {
        token_vector(tok, row);
    }
    TextEmbedding::new(Tensor::from_vec(&[len, dim], data).expect("sized above")).expect("rank 2")
}

fn token_vector(tok: &str, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let digest = Sha256::digest(tok.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let norm = libm::sqrt(out.iter().map(|v| v * v).sum::<f64>());
        if norm > 0.0 {
            // shards store f32; keep values exactly representable
            out.iter_mut().for_each(|v| *v = (*v / norm) as f32 as f64);
            return;
        }
    }
}
