//! Factorized spatial/temporal transformer denoiser ε_θ.
//!
//! Tokens are 2×2 latent patches laid out frame-major `[F·S, d]` with
//! `S = H/2 · W/2`. Spatial blocks attend within a frame and cross-attend to
//! the text embedding; temporal blocks attend across frames at one spatial
//! location, then add the gated physics cross-attention residual
//! `x + gate · Attn(W_q x, W_k p̂, W_v p̂)` with the same p̂ for every location.
//! Spatial and temporal blocks alternate, starting with a spatial block.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, GEN_PATCH};
use crate::diffusion::LatentVideo;
use crate::error::{Error, Result};
use crate::nn::{frozen_flags, learned_table, Attention, AttnOut, Bind, FeedForward, LayerNorm, Linear};
use crate::params::{FreezeMask, ParamId, ParamStore};
use crate::predictor::{PhysicsTokens, TextEmbedding};
use crate::tensor::Tensor;

pub const GENERATOR_STORE: u32 = 2;

pub mod groups {
    pub const PATCH_EMBED: &str = "generator.patch_embed";
    pub const POSITIONAL: &str = "generator.positional";
    pub const TIME_EMBED: &str = "generator.time_embed";
    pub const HEAD: &str = "generator.head";

    pub fn spatial(i: usize) -> alloc::string::String {
        alloc::format!("generator.spatial.{i}")
    }
    pub fn temporal_self(i: usize) -> alloc::string::String {
        alloc::format!("generator.temporal.{i}.self_attn")
    }
    pub fn temporal_physics(i: usize) -> alloc::string::String {
        alloc::format!("generator.temporal.{i}.physics_xattn")
    }
    pub fn temporal_ffn(i: usize) -> alloc::string::String {
        alloc::format!("generator.temporal.{i}.ffn")
    }
}

/// Which parameter groups train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Spatial blocks, patch embedding, positional and timestep embeddings frozen;
    /// every temporal-block layer and the output head train.
    Paper,
    /// Only the physics cross-attention layers (with their gates) train.
    PhysicsOnly,
    AllTrainable,
}

impl core::str::FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "physics-only" => Ok(Self::PhysicsOnly),
            "all-trainable" => Ok(Self::AllTrainable),
            other => Err(Error::Invalid(format!("unknown freeze policy `{other}`"))),
        }
    }
}

/// How the physics path is driven for one denoiser call.
#[derive(Debug, Clone, Copy)]
pub enum Physics<'a> {
    Tokens(&'a PhysicsTokens),
    /// Every gate is treated as zero and the physics branch is skipped.
    Off,
}

#[derive(Debug, Clone)]
struct SpatialBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    text: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct PhysicsCrossAttention {
    pub attn: Attention,
    /// Scalar `[1]` gate, initialized to 0.
    pub gate: ParamId,
}

impl PhysicsCrossAttention {
    /// `x' = x + gate · Attn(W_q x, W_k p̂, W_v p̂)` for `x: [R, d]`, `p̂: [N, Dp]`.
    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var, phys: Var) -> Result<(Var, AttnOut)> {
        let a = self.attn.forward(g, p, x, phys, 1)?;
        let gate = p.var(g, self.gate);
        let out = g.gated_residual(x, gate, a.out)?;
        Ok((out, a))
    }
}

#[derive(Debug, Clone)]
struct TemporalBlock {
    ln1: LayerNorm,
    attn: Attention,
    physics: PhysicsCrossAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
enum Block {
    Spatial(SpatialBlock),
    Temporal(TemporalBlock),
}

/// Denoiser parameters and layer layout.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: ModelConfig,
    store: ParamStore,
    patch: Linear,
    pos_spatial: ParamId,
    pos_temporal: ParamId,
    time_proj: Linear,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.latent_height % GEN_PATCH != 0 || cfg.latent_width % GEN_PATCH != 0 {
            return Err(Error::Config {
                field: "latent_height".into(),
                reason: format!("latent spatial dims must be divisible by the {GEN_PATCH}x{GEN_PATCH} patch"),
            });
        }
        let d = cfg.hidden_dim;
        let patch_dim = cfg.latent_channels * GEN_PATCH * GEN_PATCH;
        let s_tokens = (cfg.latent_height / GEN_PATCH) * (cfg.latent_width / GEN_PATCH);
        let mut s = ParamStore::new(GENERATOR_STORE);
        let patch = Linear::new(&mut s, "generator.patch_embed", groups::PATCH_EMBED, patch_dim, d, rng);
        let pos_spatial = learned_table(&mut s, "generator.pos_spatial", groups::POSITIONAL, s_tokens, d, 0.02, rng);
        let pos_temporal =
            learned_table(&mut s, "generator.pos_temporal", groups::POSITIONAL, cfg.latent_frames, d, 0.02, rng);
        let time_proj = Linear::new(&mut s, "generator.time_proj", groups::TIME_EMBED, cfg.timestep_embed_dim, d, rng);

        let mut blocks = Vec::new();
        let n = cfg.gen_spatial_blocks.max(cfg.gen_temporal_blocks);
        for i in 0..n {
            if i < cfg.gen_spatial_blocks {
                let grp = groups::spatial(i);
                let name = format!("generator.spatial.{i}");
                blocks.push(Block::Spatial(SpatialBlock {
                    ln1: LayerNorm::new(&mut s, &format!("{name}.ln1"), &grp, d),
                    attn: Attention::new(&mut s, &format!("{name}.attn"), &grp, d, d, cfg.gen_heads, rng),
                    ln2: LayerNorm::new(&mut s, &format!("{name}.ln2"), &grp, d),
                    text: Attention::new(&mut s, &format!("{name}.text_xattn"), &grp, d, cfg.text_dim, cfg.gen_heads, rng),
                    ln3: LayerNorm::new(&mut s, &format!("{name}.ln3"), &grp, d),
                    ffn: FeedForward::new(&mut s, &format!("{name}.ffn"), &grp, d, rng),
                }));
            }
            if i < cfg.gen_temporal_blocks {
                let name = format!("generator.temporal.{i}");
                let (gs, gp, gf) = (groups::temporal_self(i), groups::temporal_physics(i), groups::temporal_ffn(i));
                let ln1 = LayerNorm::new(&mut s, &format!("{name}.ln1"), &gs, d);
                let attn = Attention::new(&mut s, &format!("{name}.attn"), &gs, d, d, cfg.gen_heads, rng);
                let pattn =
                    Attention::new(&mut s, &format!("{name}.physics_xattn"), &gp, d, cfg.phys_dim, cfg.gen_heads, rng);
                let gate = s.add(format!("{name}.physics_xattn.gate"), &gp, Tensor::zeros(&[1]));
                blocks.push(Block::Temporal(TemporalBlock {
                    ln1,
                    attn,
                    physics: PhysicsCrossAttention { attn: pattn, gate },
                    ln3: LayerNorm::new(&mut s, &format!("{name}.ln3"), &gf, d),
                    ffn: FeedForward::new(&mut s, &format!("{name}.ffn"), &gf, d, rng),
                }));
            }
        }
        let final_norm = LayerNorm::new(&mut s, "generator.final_norm", groups::HEAD, d);
        let head = Linear::new(&mut s, "generator.head", groups::HEAD, d, patch_dim, rng);
        Ok(Self { cfg: cfg.clone(), store: s, patch, pos_spatial, pos_temporal, time_proj, blocks, final_norm, head })
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

    /// Gate parameters, one per temporal block, in block order.
    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.temporal_blocks().map(|b| b.physics.gate).collect()
    }

    pub fn gate_values(&self) -> Vec<f64> {
        self.gate_ids().into_iter().map(|id| self.store.value(id).data()[0]).collect()
    }

    pub fn set_gates(&mut self, value: f64) {
        for id in self.gate_ids() {
            self.store.value_mut(id).data_mut()[0] = value;
        }
    }

    pub fn physics_layers(&self) -> Vec<&PhysicsCrossAttention> {
        self.temporal_blocks().map(|b| &b.physics).collect()
    }

    fn temporal_blocks(&self) -> impl Iterator<Item = &TemporalBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Temporal(t) => Some(t),
            Block::Spatial(_) => None,
        })
    }

    /// Freeze mask for a policy.
    pub fn apply_freeze(&self, policy: FreezePolicy) -> FreezeMask {
        FreezeMask::from_fn(&self.store, |g| match policy {
            FreezePolicy::AllTrainable => true,
            FreezePolicy::PhysicsOnly => g.ends_with(".physics_xattn"),
            FreezePolicy::Paper => g.starts_with("generator.temporal.") || g == groups::HEAD,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let f = self.cfg.latent_frames;
        let hp = self.cfg.latent_height / GEN_PATCH;
        let wp = self.cfg.latent_width / GEN_PATCH;
        (f, hp, wp, hp * wp)
    }

    /// Runs ε_θ on the tape. `phys` is `None` when the physics path is off.
    pub fn forward_on(&self, g: &mut Graph, p: &Bind, z: Var, temb: Var, text: Var, phys: Option<Var>) -> Result<Var> {
        let c = self.cfg.latent_channels;
        let d = self.cfg.hidden_dim;
        let (f, hp, wp, s) = self.dims();
        if g.shape(z) != self.cfg.latent_shape() {
            return Err(Error::Shape(format!("latent {:?} vs config {:?}", g.shape(z), self.cfg.latent_shape())));
        }
        if g.shape(text) != [self.cfg.text_len, self.cfg.text_dim] {
            return Err(Error::Shape(format!(
                "text embedding {:?} vs config [{}, {}]",
                g.shape(text),
                self.cfg.text_len,
                self.cfg.text_dim
            )));
        }
        if let Some(ph) = phys {
            if g.shape(ph) != [self.cfg.phys_tokens, self.cfg.phys_dim] {
                return Err(Error::Shape(format!(
                    "physics tokens {:?} vs config [{}, {}]",
                    g.shape(ph),
                    self.cfg.phys_tokens,
                    self.cfg.phys_dim
                )));
            }
        }
        if g.value(temb).len() != self.cfg.timestep_embed_dim {
            return Err(Error::Shape(format!(
                "timestep embedding width {} vs {}",
                g.value(temb).len(),
                self.cfg.timestep_embed_dim
            )));
        }

        // patchify: [C, F, Hp, 2, Wp, 2] → [F, Hp, Wp, C, 2, 2] → [F·S, C·4]
        let x = g.reshape(z, &[c, f, hp, GEN_PATCH, wp, GEN_PATCH])?;
        let x = g.permute(x, &[1, 2, 4, 0, 3, 5])?;
        let x = g.reshape(x, &[f * s, c * GEN_PATCH * GEN_PATCH])?;
        let mut x = self.patch.forward(g, p, x)?;

        // positional: spatial table repeated per frame, temporal table repeated per location
        let ps = p.var(g, self.pos_spatial);
        let x3 = g.reshape(x, &[f, s * d])?;
        let ps_flat = g.reshape(ps, &[s * d])?;
        let x3 = g.add_row(x3, ps_flat)?;
        let xt = g.reshape(x3, &[f, s, d])?;
        let xt = g.permute(xt, &[1, 0, 2])?;
        let xt = g.reshape(xt, &[s, f * d])?;
        let pt = p.var(g, self.pos_temporal);
        let pt_flat = g.reshape(pt, &[f * d])?;
        let xt = g.add_row(xt, pt_flat)?;
        let xt = g.reshape(xt, &[s, f, d])?;
        let xt = g.permute(xt, &[1, 0, 2])?;
        x = g.reshape(xt, &[f * s, d])?;

        let temb = g.reshape(temb, &[1, self.cfg.timestep_embed_dim])?;
        let tvec = self.time_proj.forward(g, p, temb)?;
        let tvec = g.reshape(tvec, &[d])?;
        x = g.add_row(x, tvec)?;

        for block in &self.blocks {
            x = match block {
                Block::Spatial(b) => {
                    let h = b.ln1.forward(g, p, x)?;
                    let a = b.attn.forward(g, p, h, h, f)?;
                    let x = g.add(x, a.out)?;
                    let h = b.ln2.forward(g, p, x)?;
                    let a = b.text.forward(g, p, h, text, 1)?;
                    let x = g.add(x, a.out)?;
                    let h = b.ln3.forward(g, p, x)?;
                    let y = b.ffn.forward(g, p, h)?;
                    g.add(x, y)?
                }
                Block::Temporal(b) => {
                    // location-major [S·F, d]
                    let xl = g.reshape(x, &[f, s, d])?;
                    let xl = g.permute(xl, &[1, 0, 2])?;
                    let mut xl = g.reshape(xl, &[s * f, d])?;
                    let h = b.ln1.forward(g, p, xl)?;
                    let a = b.attn.forward(g, p, h, h, s)?;
                    xl = g.add(xl, a.out)?;
                    if let Some(ph) = phys {
                        xl = b.physics.forward(g, p, xl, ph)?.0;
                    }
                    let h = b.ln3.forward(g, p, xl)?;
                    let y = b.ffn.forward(g, p, h)?;
                    xl = g.add(xl, y)?;
                    let xf = g.reshape(xl, &[s, f, d])?;
                    let xf = g.permute(xf, &[1, 0, 2])?;
                    g.reshape(xf, &[f * s, d])?
                }
            };
        }
        let h = self.final_norm.forward(g, p, x)?;
        let out = self.head.forward(g, p, h)?;
        // unpatchify: [F, Hp, Wp, C, 2, 2] → [C, F, Hp, 2, Wp, 2]
        let out = g.reshape(out, &[f, hp, wp, c, GEN_PATCH, GEN_PATCH])?;
        let out = g.permute(out, &[3, 0, 1, 4, 2, 5])?;
        g.reshape(out, &self.cfg.latent_shape())
    }

    /// ε̂ for one latent. Non-finite outputs are reported as errors.
    pub fn denoise(
        &self,
        z_t: &LatentVideo,
        t_emb: &[f64],
        c_text: &TextEmbedding,
        physics: Physics<'_>,
    ) -> Result<LatentVideo> {
        let flags = frozen_flags(&self.store);
        let p = Bind::new(&self.store, &flags);
        let mut g = Graph::new();
        let z = g.input(z_t.tensor().clone());
        let temb = g.input(Tensor::from_vec(&[t_emb.len()], t_emb.to_vec())?);
        let text = g.input(c_text.tensor().clone());
        let phys = match physics {
            Physics::Tokens(pt) => Some(g.input(pt.tensor().clone())),
            Physics::Off => None,
        };
        let out = self.forward_on(&mut g, &p, z, temb, text, phys)?;
        let out = g.value(out).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        LatentVideo::new(out)
    }

    /// Physics cross-attention of one temporal block applied to `x_temp [F, d]`
    /// (one spatial location). Returns `x'` and the attention weights `[heads, F, N]`.
    pub fn physics_cross_attention(&self, block: usize, x_temp: &Tensor, p_hat: &PhysicsTokens) -> Result<(Tensor, Tensor)> {
        let layer = self
            .physics_layers()
            .get(block)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no temporal block {block}")))?;
        if x_temp.shape().len() != 2 || x_temp.shape()[1] != self.cfg.hidden_dim {
            return Err(Error::Shape(format!("x_temp {:?}, width must be {}", x_temp.shape(), self.cfg.hidden_dim)));
        }
        if p_hat.tensor().shape().len() != 2 || p_hat.tensor().shape()[1] != self.cfg.phys_dim {
            return Err(Error::Shape(format!("physics tokens {:?}, width must be {}", p_hat.tensor().shape(), self.cfg.phys_dim)));
        }
        let flags = frozen_flags(&self.store);
        let p = Bind::new(&self.store, &flags);
        let mut g = Graph::new();
        let x = g.input(x_temp.clone());
        let ph = g.input(p_hat.tensor().clone());
        let (out, a) = layer.forward(&mut g, &p, x, ph)?;
        Ok((g.value(out).clone(), g.value(a.weights).clone()))
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

    struct Inputs {
        z: LatentVideo,
        c: TextEmbedding,
        t: Vec<f64>,
        pa: PhysicsTokens,
        pb: PhysicsTokens,
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Inputs {
            z: LatentVideo::new(Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng)).unwrap(),
            c: TextEmbedding::new(Tensor::randn(&[cfg.text_len, cfg.text_dim], 0.2, &mut rng)).unwrap(),
            t: timestep_embedding(11, cfg.timestep_embed_dim).unwrap(),
            pa: PhysicsTokens::new(Tensor::randn(&[cfg.phys_tokens, cfg.phys_dim], 1.0, &mut rng)).unwrap(),
            pb: PhysicsTokens::new(Tensor::randn(&[cfg.phys_tokens, cfg.phys_dim], 3.0, &mut rng)).unwrap(),
        }
    }

    #[test]
    fn toy_output_shape_and_gate_zero_identity() {
        let cfg = toy();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(gen.gate_values().iter().all(|g| *g == 0.0));
        let i = inputs(&cfg, 1);
        let a = gen.denoise(&i.z, &i.t, &i.c, Physics::Tokens(&i.pa)).unwrap();
        assert_eq!(a.shape(), &[12, 8, 8, 8]);
        assert!(a.tensor().is_finite());
        let b = gen.denoise(&i.z, &i.t, &i.c, Physics::Tokens(&i.pb)).unwrap();
        let off = gen.denoise(&i.z, &i.t, &i.c, Physics::Off).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
        assert!(a.tensor().bit_eq(off.tensor()));
    }

    #[test]
    fn nonzero_gate_makes_physics_live() {
        let cfg = toy();
        let mut gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        gen.set_gates(0.5);
        let i = inputs(&cfg, 2);
        let a = gen.denoise(&i.z, &i.t, &i.c, Physics::Tokens(&i.pa)).unwrap();
        let b = gen.denoise(&i.z, &i.t, &i.c, Physics::Tokens(&i.pb)).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-6);
    }

    #[test]
    fn text_path_is_live() {
        let cfg = toy();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let i = inputs(&cfg, 3);
        let j = inputs(&cfg, 4);
        let a = gen.denoise(&i.z, &i.t, &i.c, Physics::Off).unwrap();
        let b = gen.denoise(&i.z, &i.t, &j.c, Physics::Off).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-6);
        assert!(a.tensor().bit_eq(gen.denoise(&i.z, &i.t, &i.c, Physics::Off).unwrap().tensor()));
    }

    #[test]
    fn shape_errors() {
        let cfg = toy();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let i = inputs(&cfg, 5);
        let bad = LatentVideo::new(Tensor::zeros(&[12, 8, 8, 4])).unwrap();
        assert!(matches!(gen.denoise(&bad, &i.t, &i.c, Physics::Off), Err(Error::Shape(_))));
        let badp = PhysicsTokens::new(Tensor::zeros(&[3, 32])).unwrap();
        assert!(matches!(gen.denoise(&i.z, &i.t, &i.c, Physics::Tokens(&badp)), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let cfg = toy();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let i = inputs(&cfg, 6);
        let mut z = i.z.tensor().clone();
        z.data_mut()[0] = f64::NAN;
        let z = LatentVideo::new(z).unwrap();
        assert!(matches!(gen.denoise(&z, &i.t, &i.c, Physics::Off), Err(Error::NonFinite(_))));
    }

    #[test]
    fn physics_cross_attention_contract() {
        let cfg = toy();
        let mut gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[cfg.latent_frames, cfg.hidden_dim], 1.0, &mut rng);
        let i = inputs(&cfg, 7);
        let (out, w) = gen.physics_cross_attention(0, &x, &i.pa).unwrap();
        assert!(out.bit_eq(&x));
        assert_eq!(w.shape(), &[cfg.gen_heads, cfg.latent_frames, cfg.phys_tokens]);
        for row in w.data().chunks(cfg.phys_tokens) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        // single physics token: weights are exactly one and the residual is the
        // projected value, identical for every frame
        gen.set_gates(0.7);
        let p1 = PhysicsTokens::new(Tensor::randn(&[1, cfg.phys_dim], 1.0, &mut rng)).unwrap();
        let (out, w) = gen.physics_cross_attention(0, &x, &p1).unwrap();
        assert!(w.data().iter().all(|v| *v == 1.0));
        let layer = gen.physics_layers()[0].clone();
        let st = gen.store();
        let d = cfg.hidden_dim;
        let matvec = |v: &[f64], lin: &Linear| -> Vec<f64> {
            let (w, b) = (st.value(lin.w), st.value(lin.b));
            (0..lin.fan_out)
                .map(|j| b.data()[j] + (0..lin.fan_in).map(|i| v[i] * w.data()[i * lin.fan_out + j]).sum::<f64>())
                .collect()
        };
        let v = matvec(p1.tensor().data(), &layer.attn.v);
        let o = matvec(&v, &layer.attn.out);
        for fr in 0..cfg.latent_frames {
            for j in 0..d {
                let want = x.data()[fr * d + j] + 0.7 * o[j];
                assert!((out.data()[fr * d + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn freeze_policies() {
        let cfg = toy();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let paper = gen.apply_freeze(FreezePolicy::Paper);
        for (g, t) in paper.groups() {
            if g.starts_with("generator.spatial") || g == groups::PATCH_EMBED || g == groups::POSITIONAL {
                assert!(!t, "{g} should be frozen");
            }
            if g.starts_with("generator.temporal") || g == groups::HEAD {
                assert!(t, "{g} should train");
            }
        }
        let all = gen.apply_freeze(FreezePolicy::AllTrainable);
        assert!(all.groups().all(|(_, t)| t));
        let (total, trainable) = all.count(gen.store());
        assert_eq!(total, trainable);
        let (total_p, trainable_p) = paper.count(gen.store());
        assert_eq!(total_p, total);
        assert!(trainable_p < total_p);
        let phys = gen.apply_freeze(FreezePolicy::PhysicsOnly);
        assert!(phys.groups().all(|(g, t)| t == g.ends_with("physics_xattn")));
        // every parameter sits in exactly one group
        let n: usize = gen.store().groups().iter().map(|g| gen.store().iter().filter(|(_, p)| &p.group == g).count()).sum();
        assert_eq!(n, gen.store().len());
    }

    #[test]
    fn temporal_path_is_per_location() {
        // Swapping two spatial patch positions in z_t and in the spatial positional
        // table swaps the corresponding ε̂ patches when there is no spatial block.
        let mut cfg = toy();
        cfg.gen_spatial_blocks = 0;
        cfg.validate().unwrap_err();
        cfg.gen_spatial_blocks = 1;
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let i = inputs(&cfg, 9);
        let base = gen.denoise(&i.z, &i.t, &i.c, Physics::Off).unwrap();
        // Spatial self-attention without positional asymmetry is permutation
        // equivariant too, so swap patch (0,0) with patch (1,1) everywhere.
        let mut gen2 = gen.clone();
        let pos = gen2.store().find("generator.pos_spatial").unwrap();
        let d = cfg.hidden_dim;
        let wp = cfg.latent_width / 2;
        let (a, b) = (0usize, wp + 1);
        {
            let t = gen2.store_mut().value_mut(pos).data_mut();
            for j in 0..d {
                t.swap(a * d + j, b * d + j);
            }
        }
        let swap_patches = |t: &Tensor| -> Tensor {
            let mut out = t.clone();
            let [c, f, h, w] = cfg.latent_shape();
            for ci in 0..c {
                for fi in 0..f {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let ia = ((ci * f + fi) * h + dy) * w + dx;
                            let ib = ((ci * f + fi) * h + 2 + dy) * w + 2 + dx;
                            out.data_mut().swap(ia, ib);
                        }
                    }
                }
            }
            out
        };
        let z2 = LatentVideo::new(swap_patches(i.z.tensor())).unwrap();
        let out2 = gen2.denoise(&z2, &i.t, &i.c, Physics::Off).unwrap();
        assert!(swap_patches(base.tensor()).max_abs_diff(out2.tensor()) < 1e-10);
    }
}
