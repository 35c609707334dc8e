//! The physics-token predictor.
//!
//! Three stages regress physics tokens from a noisy latent:
//!
//! ```text
//! z_t [C,F,H,W] → conv3d(s2) → GELU → conv3d(s1) → h_vis [F/2·H/2·W/2, d] (+ learned positions)
//! [h_vis; c_text·W_text; t_emb·W_time] → pre-LN transformer encoder → h_fused [M, d]
//! Q_phys [N, d] → 2× {cross-attn to h_fused, FFN} → LN → Linear(d → Dp) → p̂ [N, Dp]
//! ```
//!
//! The decoder has no query self-attention, so output row `i` depends only on
//! query row `i` and `h_fused`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, DECODER_BLOCKS};
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::nn::{frozen_flags, learned_table, Attention, Bind, Conv3d, FeedForward, LayerNorm, Linear};
use crate::params::{FreezeMask, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PREDICTOR_STORE: u32 = 1;

/// Physics tokens `[N, Dp]`: ground-truth targets or predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsTokens(Tensor);

impl PhysicsTokens {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("physics tokens must be [N, Dp], got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.0.shape() != [cfg.phys_tokens, cfg.phys_dim] {
            return Err(Error::Shape(format!(
                "physics tokens {:?} vs config [{}, {}]",
                self.0.shape(),
                cfg.phys_tokens,
                cfg.phys_dim
            )));
        }
        if !self.0.is_finite() {
            return Err(Error::NonFinite("physics tokens".into()));
        }
        Ok(())
    }
}

/// Text embedding `[L, Dt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(Tensor);

impl TextEmbedding {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("text embedding must be [L, Dt], got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.0.shape() != [cfg.text_len, cfg.text_dim] {
            return Err(Error::Shape(format!(
                "text embedding {:?} vs config [{}, {}]",
                self.0.shape(),
                cfg.text_len,
                cfg.text_dim
            )));
        }
        if !self.0.is_finite() {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_q: LayerNorm,
    cross: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Predictor parameters and layer layout.
#[derive(Debug, Clone)]
pub struct Predictor {
    cfg: ModelConfig,
    store: ParamStore,
    conv1: Conv3d,
    conv2: Conv3d,
    vis_pos: ParamId,
    text_proj: Linear,
    time_proj: Linear,
    encoder: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    queries: ParamId,
    decoder: Vec<DecoderBlock>,
    out_norm: LayerNorm,
    out_proj: Linear,
}

pub mod groups {
    pub const CONV: &str = "predictor.conv";
    pub const FUSION: &str = "predictor.fusion";
    pub const QUERIES: &str = "predictor.queries";
    pub const DECODER: &str = "predictor.decoder";
    pub const OUTPUT: &str = "predictor.output";
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let mut s = ParamStore::new(PREDICTOR_STORE);
        let conv1 = Conv3d::new(&mut s, "predictor.conv1", groups::CONV, cfg.latent_channels, d, 2, rng);
        let conv2 = Conv3d::new(&mut s, "predictor.conv2", groups::CONV, d, d, 1, rng);
        let vis_tokens = (cfg.latent_frames / 2) * (cfg.latent_height / 2) * (cfg.latent_width / 2);
        let vis_pos = learned_table(&mut s, "predictor.vis_pos", groups::FUSION, vis_tokens, d, 0.02, rng);
        let text_proj = Linear::new(&mut s, "predictor.text_proj", groups::FUSION, cfg.text_dim, d, rng);
        let time_proj = Linear::new(&mut s, "predictor.time_proj", groups::FUSION, cfg.timestep_embed_dim, d, rng);
        let encoder = (0..cfg.predictor_layers)
            .map(|i| {
                let n = format!("predictor.encoder.{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), groups::FUSION, d),
                    attn: Attention::new(&mut s, &format!("{n}.attn"), groups::FUSION, d, d, cfg.predictor_heads, rng),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), groups::FUSION, d),
                    ffn: FeedForward::new(&mut s, &format!("{n}.ffn"), groups::FUSION, d, rng),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut s, "predictor.encoder.norm", groups::FUSION, d);
        let queries = learned_table(&mut s, "predictor.queries", groups::QUERIES, cfg.phys_tokens, d, 0.02, rng);
        let decoder = (0..DECODER_BLOCKS)
            .map(|i| {
                let n = format!("predictor.decoder.{i}");
                DecoderBlock {
                    ln_q: LayerNorm::new(&mut s, &format!("{n}.ln_q"), groups::DECODER, d),
                    cross: Attention::new(&mut s, &format!("{n}.cross"), groups::DECODER, d, d, cfg.predictor_heads, rng),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), groups::DECODER, d),
                    ffn: FeedForward::new(&mut s, &format!("{n}.ffn"), groups::DECODER, d, rng),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut s, "predictor.out_norm", groups::OUTPUT, d);
        let out_proj = Linear::new(&mut s, "predictor.out_proj", groups::OUTPUT, d, cfg.phys_dim, rng);
        Ok(Self {
            cfg: cfg.clone(),
            store: s,
            conv1,
            conv2,
            vis_pos,
            text_proj,
            time_proj,
            encoder,
            enc_norm,
            queries,
            decoder,
            out_norm,
            out_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn queries_id(&self) -> ParamId {
        self.queries
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out_proj
    }

    pub fn conv_biases(&self) -> [ParamId; 2] {
        [self.conv1.b, self.conv2.b]
    }

    pub fn all_trainable(&self) -> FreezeMask {
        FreezeMask::all_trainable(&self.store)
    }

    fn vis_dims(&self) -> [usize; 3] {
        [self.cfg.latent_frames, self.cfg.latent_height, self.cfg.latent_width]
    }

    /// Conv encoder on the tape: `[C,F,H,W]` → visual tokens `[F/2·H/2·W/2, d]`.
    pub fn encode_on(&self, g: &mut Graph, p: &Bind, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[0] != self.cfg.latent_channels {
            return Err(Error::Shape(format!("latent {:?} vs config {:?}", s, self.cfg.latent_shape())));
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("latent frame/height/width must be even, got {:?}", &s[1..])));
        }
        if s[1..] != self.vis_dims() {
            return Err(Error::Shape(format!("latent {:?} vs config {:?}", s, self.cfg.latent_shape())));
        }
        let x = g.permute(z, &[1, 2, 3, 0])?;
        let x = g.reshape(x, &[s[1] * s[2] * s[3], s[0]])?;
        let (h, dims) = self.conv1.forward(g, p, x, [s[1], s[2], s[3]])?;
        let h = g.gelu(h);
        let (h, _) = self.conv2.forward(g, p, h, dims)?;
        Ok(h)
    }

    /// Fusion encoder on the tape: `[visual; text; time]` → `h_fused [M, d]`.
    pub fn fuse_on(&self, g: &mut Graph, p: &Bind, vis: Var, text: Var, temb: Var) -> Result<Var> {
        let d = self.cfg.hidden_dim;
        let vis_rows = g.shape(vis)[0];
        if g.shape(vis) != [self.store.value(self.vis_pos).shape()[0], d] {
            return Err(Error::Shape(format!("visual tokens {:?}, expected [{vis_rows}, {d}]", g.shape(vis))));
        }
        if g.shape(text).len() != 2 || g.shape(text)[1] != self.cfg.text_dim {
            return Err(Error::Shape(format!("text embedding {:?}, width must be {}", g.shape(text), self.cfg.text_dim)));
        }
        if g.value(temb).len() != self.cfg.timestep_embed_dim {
            return Err(Error::Shape(format!(
                "timestep embedding width {} vs {}",
                g.value(temb).len(),
                self.cfg.timestep_embed_dim
            )));
        }
        let pos = p.var(g, self.vis_pos);
        let vis = g.add(vis, pos)?;
        let text = self.text_proj.forward(g, p, text)?;
        let temb = g.reshape(temb, &[1, self.cfg.timestep_embed_dim])?;
        let time = self.time_proj.forward(g, p, temb)?;
        let mut x = g.concat(&[vis, text, time])?;
        for b in &self.encoder {
            let h = b.ln1.forward(g, p, x)?;
            let a = b.attn.forward(g, p, h, h, 1)?;
            x = g.add(x, a.out)?;
            let h = b.ln2.forward(g, p, x)?;
            let f = b.ffn.forward(g, p, h)?;
            x = g.add(x, f)?;
        }
        self.enc_norm.forward(g, p, x)
    }

    /// Query decoder on the tape: `h_fused [M, d]` → `p̂ [N, Dp]`.
    pub fn decode_on(&self, g: &mut Graph, p: &Bind, fused: Var) -> Result<Var> {
        if g.shape(fused).len() != 2 || g.shape(fused)[1] != self.cfg.hidden_dim {
            return Err(Error::Shape(format!(
                "fused sequence {:?}, width must be {}",
                g.shape(fused),
                self.cfg.hidden_dim
            )));
        }
        let mut q = p.var(g, self.queries);
        for b in &self.decoder {
            let h = b.ln_q.forward(g, p, q)?;
            let a = b.cross.forward(g, p, h, fused, 1)?;
            q = g.add(q, a.out)?;
            let h = b.ln2.forward(g, p, q)?;
            let f = b.ffn.forward(g, p, h)?;
            q = g.add(q, f)?;
        }
        let h = self.out_norm.forward(g, p, q)?;
        self.out_proj.forward(g, p, h)
    }

    pub fn forward_on(&self, g: &mut Graph, p: &Bind, z: Var, text: Var, temb: Var) -> Result<Var> {
        let vis = self.encode_on(g, p, z)?;
        let fused = self.fuse_on(g, p, vis, text, temb)?;
        self.decode_on(g, p, fused)
    }

    /// Latent features `[d, F/2, H/2, W/2]`.
    pub fn encode_latent(&self, z_t: &LatentVideo) -> Result<Tensor> {
        let flags = frozen_flags(&self.store);
        let p = Bind::new(&self.store, &flags);
        let mut g = Graph::new();
        let z = g.input(z_t.tensor().clone());
        let tok = self.encode_on(&mut g, &p, z)?;
        let [f, h, w] = self.vis_dims();
        let t = g.value(tok).permute(&[1, 0]);
        t.reshape(&[self.cfg.hidden_dim, f / 2, h / 2, w / 2])
    }

    /// Fused sequence `[F/2·H/2·W/2 + L + 1, d]`, ordered visual, text, time.
    pub fn fuse(&self, h_vis: &Tensor, c_text: &TextEmbedding, t_emb: &[f64]) -> Result<Tensor> {
        let d = self.cfg.hidden_dim;
        if h_vis.shape().len() != 4 || h_vis.shape()[0] != d {
            return Err(Error::Shape(format!("latent features {:?}, expected [{d}, ..]", h_vis.shape())));
        }
        let rows: usize = h_vis.shape()[1..].iter().product();
        let tokens = h_vis.clone().reshape(&[d, rows])?.permute(&[1, 0]);
        let flags = frozen_flags(&self.store);
        let p = Bind::new(&self.store, &flags);
        let mut g = Graph::new();
        let vis = g.input(tokens);
        let text = g.input(c_text.tensor().clone());
        let temb = g.input(Tensor::from_vec(&[t_emb.len()], t_emb.to_vec())?);
        let out = self.fuse_on(&mut g, &p, vis, text, temb)?;
        Ok(g.value(out).clone())
    }

    pub fn decode_physics(&self, h_fused: &Tensor) -> Result<PhysicsTokens> {
        let flags = frozen_flags(&self.store);
        let p = Bind::new(&self.store, &flags);
        let mut g = Graph::new();
        let fused = g.input(h_fused.clone());
        let out = self.decode_on(&mut g, &p, fused)?;
        PhysicsTokens::new(g.value(out).clone())
    }

    /// `encode_latent → fuse → decode_physics` in one pass.
    pub fn predict(&self, z_t: &LatentVideo, c_text: &TextEmbedding, t_emb: &[f64]) -> Result<PhysicsTokens> {
        let flags = frozen_flags(&self.store);
        let p = Bind::new(&self.store, &flags);
        let mut g = Graph::new();
        let z = g.input(z_t.tensor().clone());
        let text = g.input(c_text.tensor().clone());
        let temb = g.input(Tensor::from_vec(&[t_emb.len()], t_emb.to_vec())?);
        let out = self.forward_on(&mut g, &p, z, text, temb)?;
        let out = PhysicsTokens::new(g.value(out).clone())?;
        if !out.tensor().is_finite() {
            return Err(Error::NonFinite("predicted physics tokens".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Preset};
    use crate::diffusion::timestep_embedding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        Config::preset(Preset::Toy).model
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (LatentVideo, TextEmbedding, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentVideo::new(Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng)).unwrap();
        let c = TextEmbedding::new(Tensor::randn(&[cfg.text_len, cfg.text_dim], 0.2, &mut rng)).unwrap();
        (z, c, timestep_embedding(7, cfg.timestep_embed_dim).unwrap())
    }

    #[test]
    fn toy_shapes() {
        let cfg = toy();
        let pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (z, c, t) = inputs(&cfg, 1);
        let h = pred.encode_latent(&z).unwrap();
        assert_eq!(h.shape(), &[64, 4, 4, 4]);
        let fused = pred.fuse(&h, &c, &t).unwrap();
        assert_eq!(fused.shape(), &[64 + 16 + 1, 64]);
        let p = pred.decode_physics(&fused).unwrap();
        assert_eq!(p.tensor().shape(), &[64, 32]);
        let direct = pred.predict(&z, &c, &t).unwrap();
        assert!(direct.tensor().bit_eq(p.tensor()));
        assert!(direct.tensor().is_finite());
    }

    #[test]
    fn zero_latent_with_zero_bias_encodes_to_zero() {
        let cfg = toy();
        let pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let h = pred.encode_latent(&LatentVideo::zeros(&cfg)).unwrap();
        assert!(h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frame_shift_changes_encoding() {
        let cfg = toy();
        let pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (z, _, _) = inputs(&cfg, 2);
        // roll frames by one
        let [c, f, h, w] = cfg.latent_shape();
        let mut shifted = Tensor::zeros(&[c, f, h, w]);
        for ci in 0..c {
            for fi in 0..f {
                let src = (ci * f + (fi + f - 1) % f) * h * w;
                let dst = (ci * f + fi) * h * w;
                shifted.data_mut()[dst..dst + h * w].copy_from_slice(&z.tensor().data()[src..src + h * w]);
            }
        }
        let a = pred.encode_latent(&z).unwrap();
        let b = pred.encode_latent(&LatentVideo::new(shifted).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn odd_dims_rejected() {
        let cfg = toy();
        let pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = LatentVideo::new(Tensor::zeros(&[12, 7, 8, 8])).unwrap();
        assert!(matches!(pred.encode_latent(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn text_order_matters_and_fuse_is_deterministic() {
        let cfg = toy();
        let pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (z, c, t) = inputs(&cfg, 3);
        let h = pred.encode_latent(&z).unwrap();
        let a = pred.fuse(&h, &c, &t).unwrap();
        assert!(a.bit_eq(&pred.fuse(&h, &c, &t).unwrap()));
        let mut rev = c.tensor().clone();
        let (l, dt) = (cfg.text_len, cfg.text_dim);
        for i in 0..l {
            rev.data_mut()[i * dt..(i + 1) * dt].copy_from_slice(&c.tensor().data()[(l - 1 - i) * dt..(l - i) * dt]);
        }
        let b = pred.fuse(&h, &TextEmbedding::new(rev).unwrap(), &t).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        assert!(pred.fuse(&h, &c, &t[..8]).is_err());
    }

    #[test]
    fn duplicated_queries_duplicate_rows_and_permutation_equivariance() {
        let cfg = toy();
        let mut pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (z, c, t) = inputs(&cfg, 5);
        let d = cfg.hidden_dim;
        let base = pred.predict(&z, &c, &t).unwrap();

        // permute the query bank by reversing its rows
        let qid = pred.queries_id();
        let orig = pred.store().value(qid).clone();
        let n = cfg.phys_tokens;
        let mut perm = orig.clone();
        for i in 0..n {
            perm.data_mut()[i * d..(i + 1) * d].copy_from_slice(&orig.data()[(n - 1 - i) * d..(n - i) * d]);
        }
        *pred.store_mut().value_mut(qid) = perm;
        let permuted = pred.predict(&z, &c, &t).unwrap();
        let dp = cfg.phys_dim;
        for i in 0..n {
            let a = &base.tensor().data()[i * dp..(i + 1) * dp];
            let b = &permuted.tensor().data()[(n - 1 - i) * dp..(n - i) * dp];
            assert_eq!(a, b);
        }

        let mut dup = orig.clone();
        let row0: Vec<f64> = orig.data()[..d].to_vec();
        dup.data_mut()[d..2 * d].copy_from_slice(&row0);
        *pred.store_mut().value_mut(qid) = dup;
        let out = pred.predict(&z, &c, &t).unwrap();
        assert_eq!(out.tensor().data()[..dp], out.tensor().data()[dp..2 * dp]);
    }

    #[test]
    fn zero_output_projection_gives_bias_rows() {
        let cfg = toy();
        let mut pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (w, b) = (pred.out_proj().w, pred.out_proj().b);
        *pred.store_mut().value_mut(w) = Tensor::zeros(&[cfg.hidden_dim, cfg.phys_dim]);
        let bias: Vec<f64> = (0..cfg.phys_dim).map(|i| i as f64 * 0.5 - 3.0).collect();
        *pred.store_mut().value_mut(b) = Tensor::from_vec(&[cfg.phys_dim], bias.clone()).unwrap();
        let (z, c, t) = inputs(&cfg, 7);
        let out = pred.predict(&z, &c, &t).unwrap();
        for row in out.tensor().data().chunks(cfg.phys_dim) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn init_output_is_bounded_over_seeds() {
        let cfg = toy();
        for seed in 0..32 {
            let pred = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (z, c, t) = inputs(&cfg, 100 + seed);
            let out = pred.predict(&z, &c, &t).unwrap();
            let mean_abs = out.tensor().data().iter().map(|v| v.abs()).sum::<f64>() / out.tensor().len() as f64;
            assert!(mean_abs < 10.0, "seed {seed}: {mean_abs}");
        }
    }
}
