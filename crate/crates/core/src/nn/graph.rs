//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are borrowed from a [`ParamSet`]; [`Graph::backward`] adds the
//! resulting gradients into a [`Gradients`] buffer, so repeated calls
//! accumulate. Recording is strictly sequential: one graph per forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, Selection};
use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    Full,
    ProbSparse { factor: usize },
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Elu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        selections: Vec<Selection>,
        probs: Vec<Vec<T>>,
    },
    Dropout(Var, Vec<T>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
    },
    MaxPool(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    L1(Var, Vec<T>),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'p, T: Real> Graph<'p, T> {
    /// `train` enables dropout; `seed` drives dropout masks and ProbSparse key sampling.
    pub fn new(params: &'p ParamSet<T>, train: bool, seed: u64) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("computed node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Looks a parameter up by name.
    pub fn named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::shape(format!("no parameter named {name}")))?;
        Ok(self.param(id))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.value(a).mat(), self.value(b).mat(), T::zero(), MatMut::dense(&mut out, m, n));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(b).len() != n {
            return Err(Error::shape(format!("bias of {} for {n} columns", self.value(b).len())));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += *bv;
            }
        }
        debug_assert_eq!(out.len(), m * n);
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= *v;
        }
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *v;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_inplace(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { v.exp() - T::one() }, Op::Elu(x))
    }

    /// Normalises each row to zero mean / unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape(format!("layer norm affine size vs {n} features")));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_n = T::one() / T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for (r, row) in self.value(x).data().chunks_exact(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Multi-head attention over column blocks of `q`, `k`, `v` (`L x d_model`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mode: AttentionMode) -> Result<Var> {
        let (lq, d) = self.value(q).dims2();
        let (lk, dk) = self.value(k).dims2();
        let (lv, dv) = self.value(v).dims2();
        if d != dk || lk != lv || heads == 0 || d % heads != 0 || dv % heads != 0 || lq == 0 || lk == 0 {
            return Err(Error::shape(format!(
                "attention Q {lq}x{d}, K {lk}x{dk}, V {lv}x{dv}, {heads} heads"
            )));
        }
        let hd = d / heads;
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let mut selections = Vec::with_capacity(heads);
        for h in 0..heads {
            let sel = match mode {
                AttentionMode::Full => Selection::All,
                AttentionMode::ProbSparse { factor } => attention::select_queries(
                    MatRef::columns(self.value(q).data(), lq, d, h * hd, hd),
                    MatRef::columns(self.value(k).data(), lk, d, h * hd, hd),
                    factor,
                    &mut rng,
                ),
            };
            selections.push(sel);
        }
        self.rng = rng;
        self.attention_with_selection(q, k, v, heads, selections)
    }

    /// Attention with explicitly chosen exact rows per head.
    pub fn attention_with_selection(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        selections: Vec<Selection>,
    ) -> Result<Var> {
        let (lq, d) = self.value(q).dims2();
        let (lk, dk) = self.value(k).dims2();
        let (lv, dv) = self.value(v).dims2();
        if d != dk || lk != lv || heads == 0 || d % heads != 0 || dv % heads != 0 || selections.len() != heads {
            return Err(Error::shape(format!(
                "attention Q {lq}x{d}, K {lk}x{dk}, V {lv}x{dv}, {heads} heads"
            )));
        }
        let (hd, hv) = (d / heads, dv / heads);
        let mut out = vec![T::zero(); lq * dv];
        let mut probs = Vec::with_capacity(heads);
        for (h, sel) in selections.iter().enumerate() {
            let p = attention::head_forward(
                MatRef::columns(self.value(q).data(), lq, d, h * hd, hd),
                MatRef::columns(self.value(k).data(), lk, d, h * hd, hd),
                MatRef::columns(self.value(v).data(), lv, dv, h * hv, hv),
                sel,
                MatMut::columns(&mut out, lq, dv, h * hv, hv),
            );
            probs.push(p);
        }
        let out = Tensor::new(vec![lq, dv], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, selections, probs }, &[q, k, v]))
    }

    /// Inverted dropout; identity when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= *m;
        }
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    /// Dropout with a caller-supplied mask (already scaled).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout mask length"));
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= *m;
        }
        Ok(self.push(out, Op::Dropout(x, mask), &[x]))
    }

    /// Kernel-3 convolution along rows (time) with circular padding.
    /// `x: L x C_in`, `w: 3*C_in x C_out` (tap-major), `b: C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, c_in) = self.value(x).dims2();
        let (wr, c_out) = self.value(w).dims2();
        if wr != 3 * c_in || self.value(b).len() != c_out || l == 0 {
            return Err(Error::shape(format!(
                "conv1d input {l}x{c_in}, weight {wr}x{c_out}, bias {}",
                self.value(b).len()
            )));
        }
        let cols = im2col(self.value(x).data(), l, c_in);
        let mut out = vec![T::zero(); l * c_out];
        gemm(
            T::one(),
            MatRef::dense(&cols, l, 3 * c_in),
            self.value(w).mat(),
            T::zero(),
            MatMut::dense(&mut out, l, c_out),
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(c_out) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += *bv;
            }
        }
        let out = Tensor::new(vec![l, c_out], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b, cols }, &[x, w, b]))
    }

    /// Max-pool along rows: kernel 3, stride 2, padding 1; `L -> floor((L-1)/2) + 1`.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (l, c) = self.value(x).dims2();
        if l < 2 {
            return Err(Error::shape(format!("cannot pool a sequence of length {l}")));
        }
        let lo = (l - 1) / 2 + 1;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); lo * c];
        let mut arg = vec![0usize; lo * c];
        for o in 0..lo {
            let first = (2 * o).saturating_sub(1);
            let last = (2 * o + 1).min(l - 1);
            for ch in 0..c {
                let mut best = first;
                for i in first + 1..=last {
                    if src[i * c + ch] > src[best * c + ch] {
                        best = i;
                    }
                }
                out[o * c + ch] = src[best * c + ch];
                arg[o * c + ch] = best * c + ch;
            }
        }
        let out = Tensor::new(vec![lo, c], out)?;
        Ok(self.push(out, Op::MaxPool(x, arg), &[x]))
    }

    /// Mean over rows: `L x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (l, d) = self.value(x).dims2();
        let mut out = vec![T::zero(); d];
        for row in self.value(x).data().chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let inv = T::one() / T::of(l as f64);
        for o in &mut out {
            *o *= inv;
        }
        self.push(Tensor::new(vec![1, d], out).expect("1 x d"), Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `sum |pred - target|`.
    pub fn l1(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} targets",
                self.value(pred).len(),
                target.len()
            )));
        }
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (*p - *t).abs())
            .sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::L1(pred, target.to_vec()), &[pred]))
    }

    /// Reverse pass from a scalar node; parameter gradients are added to `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::shape("loss node is not part of this graph"));
        }
        let mut g: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gi, &mut g, grads)?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        i: usize,
        gout: &Tensor<T>,
        g: &mut [Option<Tensor<T>>],
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let gd = gout.data();
        match &self.nodes[i].op {
            Op::Param(id) => {
                grads.get_mut(*id).add_assign(gout);
            }
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.needs(*a) {
                    let buf = slot(g, *a, self.value(*a).shape());
                    gemm(T::one(), MatRef::dense(gd, m, n), self.value(*b).mat().t(), T::one(), MatMut::dense(buf.data_mut(), m, k));
                }
                if self.needs(*b) {
                    let buf = slot(g, *b, self.value(*b).shape());
                    gemm(T::one(), self.value(*a).mat().t(), MatRef::dense(gd, m, n), T::one(), MatMut::dense(buf.data_mut(), k, n));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    slot(g, *x, self.value(*x).shape()).add_assign(gout);
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let buf = slot(g, *b, self.value(*b).shape());
                    for row in gd.chunks_exact(n) {
                        for (o, v) in buf.data_mut().iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        slot(g, *v, self.value(*v).shape()).add_assign(gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    slot(g, *a, self.value(*a).shape()).add_assign(gout);
                }
                if self.needs(*b) {
                    let buf = slot(g, *b, self.value(*b).shape());
                    for (o, v) in buf.data_mut().iter_mut().zip(gd) {
                        *o -= *v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if self.needs(*a) {
                    let buf = slot(g, *a, self.value(*a).shape());
                    for ((o, gv), bv) in buf.data_mut().iter_mut().zip(gd).zip(&vb) {
                        *o += *gv * *bv;
                    }
                }
                if self.needs(*b) {
                    let buf = slot(g, *b, self.value(*b).shape());
                    for ((o, gv), av) in buf.data_mut().iter_mut().zip(gd).zip(&va) {
                        *o += *gv * *av;
                    }
                }
            }
            Op::Scale(x, c) => {
                let buf = slot(g, *x, self.value(*x).shape());
                for (o, v) in buf.data_mut().iter_mut().zip(gd) {
                    *o += *v * *c;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let buf = slot(g, *x, self.value(*x).shape());
                for ((o, v), xv) in buf.data_mut().iter_mut().zip(gd).zip(xs) {
                    if *xv > T::zero() {
                        *o += *v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let buf = slot(g, *x, self.value(*x).shape());
                for ((o, v), xv) in buf.data_mut().iter_mut().zip(gd).zip(xs) {
                    *o += *v * gelu_grad(*xv);
                }
            }
            Op::Elu(x) => {
                let xs = self.value(*x).data();
                let buf = slot(g, *x, self.value(*x).shape());
                for ((o, v), xv) in buf.data_mut().iter_mut().zip(gd).zip(xs) {
                    *o += if *xv > T::zero() { *v } else { *v * xv.exp() };
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let buf = slot(g, *gamma, self.value(*gamma).shape());
                    for (grow, hrow) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            buf.data_mut()[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = slot(g, *beta, self.value(*beta).shape());
                    for grow in gd.chunks_exact(n) {
                        for c in 0..n {
                            buf.data_mut()[c] += grow[c];
                        }
                    }
                }
                if self.needs(*x) {
                    let inv_n = T::one() / T::of(n as f64);
                    let buf = slot(g, *x, self.value(*x).shape());
                    for (r, (grow, hrow)) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = grow[c] * gam[c];
                            s1 += dh;
                            s2 += dh * hrow[c];
                        }
                        let out = &mut buf.data_mut()[r * n..(r + 1) * n];
                        for c in 0..n {
                            let dh = grow[c] * gam[c];
                            out[c] += rstd[r] * (dh - inv_n * s1 - hrow[c] * inv_n * s2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, selections, probs } => {
                let (lq, d) = self.value(*q).dims2();
                let (lk, _) = self.value(*k).dims2();
                let dv = self.value(*v).dims2().1;
                let (hd, hv) = (d / heads, dv / heads);
                let (nq, nk, nv) = (self.needs(*q), self.needs(*k), self.needs(*v));
                let mut dq = vec![T::zero(); if nq { lq * d } else { 0 }];
                let mut dk = vec![T::zero(); if nk { lk * d } else { 0 }];
                let mut dvb = vec![T::zero(); if nv { lk * dv } else { 0 }];
                for h in 0..*heads {
                    attention::head_backward(
                        MatRef::columns(self.value(*q).data(), lq, d, h * hd, hd),
                        MatRef::columns(self.value(*k).data(), lk, d, h * hd, hd),
                        MatRef::columns(self.value(*v).data(), lk, dv, h * hv, hv),
                        &selections[h],
                        &probs[h],
                        MatRef::columns(gd, lq, dv, h * hv, hv),
                        nq.then(|| MatMut::columns(&mut dq, lq, d, h * hd, hd)),
                        nk.then(|| MatMut::columns(&mut dk, lk, d, h * hd, hd)),
                        nv.then(|| MatMut::columns(&mut dvb, lk, dv, h * hv, hv)),
                    );
                }
                for (var, buf, on) in [(q, dq, nq), (k, dk, nk), (v, dvb, nv)] {
                    if on {
                        let shape = self.value(*var).shape().to_vec();
                        slot(g, *var, &shape).add_assign(&Tensor::new(shape, buf)?);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let buf = slot(g, *x, self.value(*x).shape());
                for ((o, v), m) in buf.data_mut().iter_mut().zip(gd).zip(mask) {
                    *o += *v * *m;
                }
            }
            Op::Conv1d { x, w, b, cols } => {
                let (l, c_in) = self.value(*x).dims2();
                let c_out = self.value(*b).len();
                if self.needs(*w) {
                    let buf = slot(g, *w, self.value(*w).shape());
                    gemm(
                        T::one(),
                        MatRef::dense(cols, l, 3 * c_in).t(),
                        MatRef::dense(gd, l, c_out),
                        T::one(),
                        MatMut::dense(buf.data_mut(), 3 * c_in, c_out),
                    );
                }
                if self.needs(*b) {
                    let buf = slot(g, *b, self.value(*b).shape());
                    for row in gd.chunks_exact(c_out) {
                        for (o, v) in buf.data_mut().iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); l * 3 * c_in];
                    gemm(
                        T::one(),
                        MatRef::dense(gd, l, c_out),
                        self.value(*w).mat().t(),
                        T::zero(),
                        MatMut::dense(&mut dcols, l, 3 * c_in),
                    );
                    let buf = slot(g, *x, self.value(*x).shape());
                    col2im_add(&dcols, l, c_in, buf.data_mut());
                }
            }
            Op::MaxPool(x, arg) => {
                let buf = slot(g, *x, self.value(*x).shape());
                for (v, &src) in gd.iter().zip(arg) {
                    buf.data_mut()[src] += *v;
                }
            }
            Op::MeanRows(x) => {
                let (l, d) = self.value(*x).dims2();
                let inv = T::one() / T::of(l as f64);
                let buf = slot(g, *x, self.value(*x).shape());
                for row in buf.data_mut().chunks_exact_mut(d) {
                    for (o, v) in row.iter_mut().zip(gd) {
                        *o += *v * inv;
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                let buf = slot(g, *x, self.value(*x).shape());
                for o in buf.data_mut() {
                    *o += s;
                }
            }
            Op::L1(pred, target) => {
                let s = gd[0];
                let p = self.value(*pred).data().to_vec();
                let buf = slot(g, *pred, self.value(*pred).shape());
                for ((o, pv), t) in buf.data_mut().iter_mut().zip(&p).zip(target) {
                    *o += s * abs_subgradient(*pv - *t);
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Real>(g: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    g[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Sign with `0` mapped to `0`.
pub fn abs_subgradient<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// `cols[i, j*C + c] = x[(i + j - 1) mod L, c]`.
fn im2col<T: Real>(x: &[T], l: usize, c: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); l * 3 * c];
    for i in 0..l {
        for j in 0..3 {
            let src = (i + l + j - 1) % l;
            cols[i * 3 * c + j * c..i * 3 * c + (j + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], l: usize, c: usize, dx: &mut [T]) {
    for i in 0..l {
        for j in 0..3 {
            let dst = (i + l + j - 1) % l;
            for ch in 0..c {
                dx[dst * c + ch] += dcols[i * 3 * c + j * c + ch];
            }
        }
    }
}
