//! Layer building blocks expressed on the autodiff tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::FFN_MULT;
use crate::error::{Error, Result};
use crate::params::{FreezeMask, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Binds a parameter store and its trainable flags to a tape.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    trainable: &'a [bool],
}

impl<'a> Bind<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a [bool]) -> Self {
        Self { store, trainable }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.store, id, self.trainable[id.index()])
    }
}

/// Per-parameter trainable flags derived from a mask.
pub fn trainable_flags(store: &ParamStore, mask: &FreezeMask) -> Vec<bool> {
    store.ids().map(|id| mask.param_trainable(store, id)).collect()
}

/// All-false flags: a forward pass that records no gradients.
pub fn frozen_flags(store: &ParamStore) -> Vec<bool> {
    alloc::vec![false; store.len()]
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `U(±1/√fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let w = store.add(format!("{name}.weight"), group, Tensor::uniform(&[fan_in, fan_out], bound, rng));
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[width], 1.0));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: &str, width: usize, rng: &mut R) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), group, width, width * FFN_MULT, rng);
        let down = Linear::new(store, &format!("{name}.down"), group, width * FFN_MULT, width, rng);
        Self { up, down }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output maps.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus the softmax weights `[G·heads, Sq, Sk]`.
pub struct AttnOut {
    pub out: Var,
    pub weights: Var,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), group, kv_width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), group, kv_width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), group, width, width, rng),
            heads,
            width,
        }
    }

    /// `queries` is `[G·Sq, width]` and `context` is `[G·Sk, kv_width]`; each of the
    /// `G` contiguous groups attends only within itself. With `groups = 1` every
    /// query row sees the whole context, which is how a shared context is broadcast.
    pub fn forward(&self, g: &mut Graph, p: &Bind, queries: Var, context: Var, groups: usize) -> Result<AttnOut> {
        let (rows_q, rows_k) = (g.shape(queries)[0], g.shape(context)[0]);
        if groups == 0 || rows_q % groups != 0 || rows_k % groups != 0 {
            return Err(Error::Shape(format!("attention rows {rows_q}/{rows_k} not divisible into {groups} groups")));
        }
        let (sq, sk) = (rows_q / groups, rows_k / groups);
        let h = self.heads;
        let dh = self.width / h;
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let q = split_heads(g, q, groups, sq, h, dh)?;
        let k = split_heads(g, k, groups, sk, h, dh)?;
        let v = split_heads(g, v, groups, sk, h, dh)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64));
        let weights = g.softmax(scores);
        let o = g.bmm(weights, v, false)?;
        let o = g.reshape(o, &[groups, h, sq, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[groups * sq, self.width])?;
        let out = self.out.forward(g, p, o)?;
        Ok(AttnOut { out, weights })
    }
}

fn split_heads(g: &mut Graph, x: Var, groups: usize, seq: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[groups, seq, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[groups * heads, seq, dh])
}

/// 3×3×3 convolution, zero padding 1, on channels-last volumes `[D·H·W, C]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    /// `[C_out, 27·C_in]`
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = 27 * c_in;
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let w = store.add(format!("{name}.weight"), group, Tensor::uniform(&[c_out, fan_in], bound, rng));
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[c_out]));
        Self { w, b, stride, c_in, c_out }
    }

    /// Returns the output volume `[D'·H'·W', C_out]` and its spatial dims.
    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var, dims: [usize; 3]) -> Result<(Var, [usize; 3])> {
        let cols = g.im2col3d(x, dims, self.stride)?;
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.matmul_t(cols, w)?;
        let y = g.add_row(y, b)?;
        let out = dims.map(|n| crate::autodiff::conv_out(n, self.stride));
        Ok((y, out))
    }
}

/// Adds a learned `[rows, width]` table.
pub fn learned_table<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    group: &str,
    rows: usize,
    width: usize,
    std: f64,
    rng: &mut R,
) -> ParamId {
    store.add(String::from(name), group, Tensor::randn(&[rows, width], std, rng))
}
