//! A small reverse-mode autodiff tape.
//!
//! Every forward call appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a trainable leaf. Frozen parameters and inputs
//! never receive gradients, so gradient routing follows the tape exactly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Identifies one parameter tensor in one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamRef {
    pub store: u32,
    pub id: ParamId,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamRef>),
    MatMul { a: Var, b: Var, tb: bool },
    Bmm { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat(Vec<Var>),
    Im2Col { x: Var, dims: [usize; 4], stride: usize },
    GatedResidual { x: Var, gate: Var, y: Var },
    Mse(Var, Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), false)
    }

    /// An input whose gradient is tracked (used by gradient probes).
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let r = ParamRef { store: store.key(), id };
        self.push(store.value(id).clone(), Op::Leaf(Some(r)), trainable)
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul expects 2-d operands", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul inner dims differ", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if tb {
            tensor::matmul_nt_acc(av, bv, &mut out, m, k, n);
        } else {
            tensor::matmul_nn_acc(av, bv, &mut out, m, k, n);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul { a, b, tb }, ng))
    }

    /// Batched matmul over a leading batch axis: `[B,m,k]·[B,k,n]` (or `[B,n,k]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm expects [B,m,k] operands with equal B", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("bmm inner dims differ", sa, sb));
        }
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if tb {
                tensor::matmul_nt_acc(ab, bb, ob, m, k, n);
            } else {
                tensor::matmul_nn_acc(ab, bb, ob, m, k, n);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[bs, m, n], out)?, Op::Bmm { a, b, tb }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Adds a vector `b` of width `C` to every row of `a` (last axis `C`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.shape(b).iter().product::<usize>();
        if self.shape(a).last() != Some(&c) {
            return Err(shape_err("add_row", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        let bv = self.value(b).data();
        for row in v.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddRow(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = *src.shape().last().unwrap_or(&1);
        let mut v = src.clone();
        for row in v.data_mut().chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - mx);
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.value(gamma).len() != c || self.value(beta).len() != c || c == 0 {
            return Err(shape_err("layer_norm affine width", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        let mut rstds = Vec::with_capacity(xv.len() / c);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / libm::sqrt(var + LN_EPS);
            rstds.push(rstd);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd: rstds }, ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(alloc::format!("bad permutation {:?} for rank {}", perm, rank)));
        }
        let v = self.value(a).permute(perm);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Concatenates along axis 0; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(shape_err("concat trailing dims", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Gathers 3×3×3 neighbourhoods (zero padding 1) of a channels-last volume
    /// `[D·H·W, C]` into rows `[D'·H'·W', 27·C]` for a convolution by matmul.
    pub fn im2col3d(&mut self, x: Var, dims: [usize; 3], stride: usize) -> Result<Var> {
        let s = self.shape(x);
        let (d, h, w) = (dims[0], dims[1], dims[2]);
        if s.len() != 2 || s[0] != d * h * w || stride == 0 {
            return Err(shape_err("im2col3d input", s, &dims));
        }
        let c = s[1];
        let (od, oh, ow) = (conv_out(d, stride), conv_out(h, stride), conv_out(w, stride));
        let xv = self.value(x).data();
        let cols_w = 27 * c;
        let mut out = vec![0.0; od * oh * ow * cols_w];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let row = ((z * oh + y) * ow + xx) * cols_w;
                    for (ki, (dz, dy, dx)) in kernel_offsets().enumerate() {
                        let (iz, iy, ix) = (
                            (z * stride) as isize + dz,
                            (y * stride) as isize + dy,
                            (xx * stride) as isize + dx,
                        );
                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let src = ((iz as usize * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + ki * c;
                        out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[od * oh * ow, cols_w], out)?,
            Op::Im2Col { x, dims: [d, h, w, c], stride },
            ng,
        ))
    }

    /// `x + gate · y`, except that a gate of exactly zero returns `x` bit-for-bit.
    /// The gradient with respect to the gate is still `Σ dout·y`.
    pub fn gated_residual(&mut self, x: Var, gate: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) || self.value(gate).len() != 1 {
            return Err(shape_err("gated_residual", self.shape(x), self.shape(y)));
        }
        let gv = self.value(gate).data()[0];
        let mut v = self.value(x).clone();
        if gv != 0.0 {
            for (a, b) in v.data_mut().iter_mut().zip(self.value(y).data()) {
                *a += gv * b;
            }
        }
        let ng = self.ng(x) || self.ng(gate) || self.ng(y);
        Ok(self.push(v, Op::GatedResidual { x, gate, y }, ng))
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::full(&[1], s / n as f64), Op::Mse(a, b), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let g = gout.data();
        match &node.op {
            Op::Leaf(_) | Op::Detach => {}
            Op::MatMul { a, b, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *tb { sb[0] } else { sb[1] };
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, sa);
                    if *tb {
                        tensor::matmul_nn_acc(g, self.value(*b).data(), ga, m, n, k);
                    } else {
                        tensor::matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let gb = grad_slot(grads, *b, sb);
                    if *tb {
                        tensor::matmul_tn_acc(g, av, gb, m, n, k);
                    } else {
                        tensor::matmul_tn_acc(av, g, gb, m, k, n);
                    }
                }
            }
            Op::Bmm { a, b, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *tb { sb[1] } else { sb[2] };
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let ga = grad_slot(grads, *a, sa);
                    for t in 0..bs {
                        let gg = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bv[t * k * n..(t + 1) * k * n];
                        let gab = &mut ga[t * m * k..(t + 1) * m * k];
                        if *tb {
                            tensor::matmul_nn_acc(gg, bb, gab, m, n, k);
                        } else {
                            tensor::matmul_nt_acc(gg, bb, gab, m, n, k);
                        }
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let gb = grad_slot(grads, *b, sb);
                    for t in 0..bs {
                        let gg = &g[t * m * n..(t + 1) * m * n];
                        let ab = &av[t * m * k..(t + 1) * m * k];
                        let gbb = &mut gb[t * k * n..(t + 1) * k * n];
                        if *tb {
                            tensor::matmul_tn_acc(gg, ab, gbb, m, n, k);
                        } else {
                            tensor::matmul_tn_acc(ab, gg, gbb, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        acc(grad_slot(grads, v, self.shape(v)), g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    acc(grad_slot(grads, *a, self.shape(*a)), g);
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, *b, self.shape(*b));
                    let c = gb.len();
                    for row in g.chunks(c) {
                        acc(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.ng(x) {
                        let yv = self.value(y).data();
                        let gx = grad_slot(grads, x, self.shape(x));
                        for ((d, &go), &o) in gx.iter_mut().zip(g).zip(yv) {
                            *d += go * o;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, self.shape(*a));
                    for (d, &go) in ga.iter_mut().zip(g) {
                        *d += go * s;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let xv = self.value(*a).data();
                    let ga = grad_slot(grads, *a, self.shape(*a));
                    for ((d, &go), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *d += go * gelu_grad(x);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.ng(*a) {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap_or(&1);
                    let ga = grad_slot(grads, *a, self.shape(*a));
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &go), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yy * (go - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let c = *self.shape(*x).last().unwrap();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                // normalized activations, recomputed from the stored statistics
                let mut xhat = vec![0.0; xv.len()];
                for (r, (xr, hr)) in xv.chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    for (h, &v) in hr.iter_mut().zip(xr) {
                        *h = (v - mean) * rstd[r];
                    }
                }
                if self.ng(*gamma) {
                    let gg = grad_slot(grads, *gamma, self.shape(*gamma));
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &go), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += go * h;
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = grad_slot(grads, *beta, self.shape(*beta));
                    for gr in g.chunks(c) {
                        acc(gb, gr);
                    }
                }
                if self.ng(*x) {
                    let gx = grad_slot(grads, *x, self.shape(*x));
                    for (r, ((gr, hr), dr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            s1 += gh;
                            s2 += gh * hr[j];
                        }
                        let inv = 1.0 / c as f64;
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            dr[j] += rstd[r] * (gh - inv * s1 - hr[j] * inv * s2);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if self.ng(*a) {
                    let inv = tensor::inverse_perm(perm);
                    let (_, back) = tensor::permute_data(node.value.shape(), g, &inv);
                    acc(grad_slot(grads, *a, self.shape(*a)), &back);
                }
            }
            Op::Reshape(a) => {
                if self.ng(*a) {
                    acc(grad_slot(grads, *a, self.shape(*a)), g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        acc(grad_slot(grads, p, self.shape(p)), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Im2Col { x, dims, stride } => {
                if self.ng(*x) {
                    let [d, h, w, c] = *dims;
                    let (od, oh, ow) = (conv_out(d, *stride), conv_out(h, *stride), conv_out(w, *stride));
                    let gx = grad_slot(grads, *x, self.shape(*x));
                    let cols_w = 27 * c;
                    for z in 0..od {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let row = ((z * oh + y) * ow + xx) * cols_w;
                                for (ki, (dz, dy, dx)) in kernel_offsets().enumerate() {
                                    let (iz, iy, ix) = (
                                        (z * stride) as isize + dz,
                                        (y * stride) as isize + dy,
                                        (xx * stride) as isize + dx,
                                    );
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let dst = ((iz as usize * h + iy as usize) * w + ix as usize) * c;
                                    let src = row + ki * c;
                                    acc(&mut gx[dst..dst + c], &g[src..src + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::GatedResidual { x, gate, y } => {
                let gv = self.value(*gate).data()[0];
                if self.ng(*x) {
                    acc(grad_slot(grads, *x, self.shape(*x)), g);
                }
                if self.ng(*gate) {
                    let s = tensor::dot(g, self.value(*y).data());
                    grad_slot(grads, *gate, self.shape(*gate))[0] += s;
                }
                if self.ng(*y) {
                    let gy = grad_slot(grads, *y, self.shape(*y));
                    for (d, &go) in gy.iter_mut().zip(g) {
                        *d += gv * go;
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len().max(1) as f64;
                let scale = 2.0 * g[0] / n;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, self.shape(*a));
                    for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, *b, self.shape(*b));
                    for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                }
            }
        }
    }

    fn param_ref(&self, v: Var) -> Option<ParamRef> {
        match self.nodes[v.0].op {
            Op::Leaf(r) => r,
            _ => None,
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that received one.
    pub fn params<'a>(&'a self, graph: &'a Graph) -> impl Iterator<Item = (ParamRef, &'a Tensor)> + 'a {
        self.grads.iter().enumerate().filter_map(move |(i, g)| {
            let g = g.as_ref()?;
            graph.param_ref(Var(i)).map(|r| (r, g))
        })
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(alloc::format!("{what}: {a:?} vs {b:?}"))
}

pub(crate) fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

fn kernel_offsets() -> impl Iterator<Item = (isize, isize, isize)> {
    (0..27).map(|k| ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1))
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to one tracked input.
    fn check_input_grad(shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input_tracked(x0.clone());
        let loss = f(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input_tracked(xp);
                let l = f(&mut g, x);
                g.value(l).data()[0]
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - num).abs() / (1e-6 + a.abs().max(num.abs()));
            assert!(err < 1e-4, "elem {i}: analytic {a} numeric {num}");
        }
    }

    fn target(g: &mut Graph, shape: &[usize]) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        g.input(Tensor::randn(shape, 1.0, &mut rng))
    }

    #[test]
    fn grad_matmul_and_transposed() {
        check_input_grad(&[3, 4], 1, |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w = g.input(Tensor::randn(&[4, 2], 1.0, &mut rng));
            let w2 = g.input(Tensor::randn(&[5, 2], 1.0, &mut rng));
            let y = g.matmul(x, w).unwrap();
            let z = g.matmul_t(y, w2).unwrap();
            let t = target(g, &[3, 5]);
            g.mse(z, t).unwrap()
        });
        check_input_grad(&[4, 2], 2, |g, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let x = g.input(Tensor::randn(&[3, 4], 1.0, &mut rng));
            let w2 = g.input(Tensor::randn(&[5, 2], 1.0, &mut rng));
            let y = g.matmul(x, w).unwrap();
            let yt = g.permute(y, &[1, 0]).unwrap();
            let z = g.matmul(w2, yt).unwrap();
            let t = target(g, &[5, 3]);
            g.mse(z, t).unwrap()
        });
    }

    #[test]
    fn grad_bmm_softmax() {
        check_input_grad(&[2, 3, 4], 3, |g, q| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let k = g.input(Tensor::randn(&[2, 5, 4], 1.0, &mut rng));
            let v = g.input(Tensor::randn(&[2, 5, 3], 1.0, &mut rng));
            let s = g.bmm(q, k, true).unwrap();
            let p = g.softmax(s);
            let o = g.bmm(p, v, false).unwrap();
            let t = target(g, &[2, 3, 3]);
            g.mse(o, t).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm_gelu_rows() {
        check_input_grad(&[3, 5], 4, |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let gamma = g.input(Tensor::randn(&[5], 1.0, &mut rng));
            let beta = g.input(Tensor::randn(&[5], 1.0, &mut rng));
            let b = g.input(Tensor::randn(&[5], 1.0, &mut rng));
            let y = g.layer_norm(x, gamma, beta).unwrap();
            let y = g.gelu(y);
            let y = g.add_row(y, b).unwrap();
            let y2 = g.mul(y, x).unwrap();
            let y3 = g.scale(y2, 0.7);
            let t = target(g, &[3, 5]);
            g.mse(y3, t).unwrap()
        });
    }

    #[test]
    fn grad_im2col_concat_gate() {
        check_input_grad(&[2 * 2 * 4, 2], 5, |g, x| {
            let cols = g.im2col3d(x, [2, 2, 4], 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let w = g.input(Tensor::randn(&[3, 54], 1.0, &mut rng));
            let y = g.matmul_t(cols, w).unwrap();
            let extra = g.input(Tensor::randn(&[1, 3], 1.0, &mut rng));
            let y = g.concat(&[y, extra]).unwrap();
            let gate = g.input(Tensor::full(&[1], 0.3));
            let r = g.input(Tensor::randn(&[3, 3], 1.0, &mut rng));
            let y = g.gated_residual(r, gate, y).unwrap();
            let t = target(g, &[3, 3]);
            g.mse(y, t).unwrap()
        });
    }

    #[test]
    fn gated_residual_zero_gate_is_identity_but_has_gate_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2], vec![-0.0, 1.5]).unwrap());
        let y = g.input(Tensor::from_vec(&[2], vec![f64::NAN, 2.0]).unwrap());
        let gate = g.input_tracked(Tensor::zeros(&[1]));
        let out = g.gated_residual(x, gate, y).unwrap();
        assert!(g.value(out).bit_eq(g.value(x)));

        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let y = g.input(Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap());
        let gate = g.input_tracked(Tensor::zeros(&[1]));
        let out = g.gated_residual(x, gate, y).unwrap();
        let zero = g.input(Tensor::zeros(&[2]));
        let loss = g.mse(out, zero).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/dgate mean((x + gate y)^2) at gate 0 = mean(2 x y) = (4 - 2) / 2
        assert!((grads.wrt(gate).unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[2, 2], 1.0));
        let b = g.input_tracked(Tensor::full(&[2, 2], 2.0));
        let d = g.detach(b);
        let s = g.add(a, d).unwrap();
        let t = g.input(Tensor::zeros(&[2, 2]));
        let l = g.mse(s, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(a).is_none());
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.input(Tensor::randn(&[4, 7], 3.0, &mut rng));
        let p = g.softmax(x);
        for row in g.value(p).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
