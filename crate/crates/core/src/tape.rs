//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive records
//! its output together with whatever it needs for the backward rule;
//! [`Tape::backward`] then walks the record once, in strict reverse order,
//! and accumulates parameter gradients into the [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)` treated as one sequence.
pub type Segment = (usize, usize);

/// Cached keys and values for positions preceding the current rows.
#[derive(Clone, Debug)]
pub struct AttnPrefix {
    pub keys: Tensor,
    pub values: Tensor,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Gelu(Var),
    Map {
        x: Var,
        df: fn(f64) -> f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        prefix: Option<AttnPrefix>,
        probs: Vec<Vec<f64>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<Segment>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x + b` with `b` (a single row) broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::Shape(format!(
                "add_row: row of {} onto {} columns",
                bv.len(),
                c
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::Shape("mul_const: shapes differ".into()));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        self.push(out, Op::Gelu(x))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        self.push(out, Op::Map { x, df })
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::Shape(format!(
                "layer_norm: affine of {} on {} columns",
                g.len(),
                c
            )));
        }
        let mut xhat = Tensor::zeros(&[rows, c]);
        let mut out = Tensor::zeros(xv.shape());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for j in 0..c {
                xh[j] = (row[j] - mean) * rs;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xh[j] * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `T×h`. Each segment attends only within itself; with
    /// `causal`, row `i` of a segment sees rows `≤ i`. A `prefix` (only valid
    /// with a single segment) supplies keys/values for earlier positions that
    /// every row may attend to; it is treated as a constant.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        causal: bool,
        prefix: Option<AttnPrefix>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = qv.cols();
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::Shape("attention: q, k, v shapes differ".into()));
        }
        if let Some(p) = &prefix {
            if segments.len() != 1 {
                return Err(Error::Cache(
                    "a cached prefix requires exactly one segment".into(),
                ));
            }
            if p.keys.cols() != h || p.values.cols() != h || p.keys.rows() != p.values.rows() {
                return Err(Error::Cache(format!(
                    "cache width {} does not match hidden size {}",
                    p.keys.cols(),
                    h
                )));
            }
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plen = prefix.as_ref().map_or(0, |p| p.keys.rows());
        let mut out = Tensor::zeros(qv.shape());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in &segments {
            let width = plen + len;
            for hd in 0..heads {
                let off = hd * dh;
                let mut pm = vec![0.0; len * width];
                for i in 0..len {
                    let qi = &qv.row(start + i)[off..off + dh];
                    let visible = if causal { plen + i + 1 } else { width };
                    let row = &mut pm[i * width..(i + 1) * width];
                    for (j, slot) in row.iter_mut().enumerate().take(visible) {
                        let kj = if j < plen {
                            &prefix.as_ref().unwrap().keys.row(j)[off..off + dh]
                        } else {
                            &kv.row(start + j - plen)[off..off + dh]
                        };
                        *slot = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(&mut row[..visible]);
                    let o = &mut out.row_mut(start + i)[off..off + dh];
                    for (j, &p) in row.iter().enumerate().take(visible) {
                        let vj = if j < plen {
                            &prefix.as_ref().unwrap().values.row(j)[off..off + dh]
                        } else {
                            &vv.row(start + j - plen)[off..off + dh]
                        };
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo += p * vvv;
                        }
                    }
                }
                probs.push(pm);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                prefix,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an attention node, per (segment, head),
    /// each `len × (prefix + len)` row-major.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= xv.rows() {
                return Err(Error::Shape(format!(
                    "gather_rows: index {} out of {} rows",
                    i,
                    xv.rows()
                )));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(x, idx)))
    }

    /// One output row per segment: the mean of that segment's rows.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Segment>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros(&[segments.len(), c]);
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > xv.rows() {
                return Err(Error::Shape("segment_mean: bad segment".into()));
            }
            let o = out.row_mut(s);
            for r in start..start + len {
                for (oo, v) in o.iter_mut().zip(xv.row(r)) {
                    *oo += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        Ok(self.push(out, Op::SegmentMean(x, segments)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Sum over rows of `-log softmax(logits_r)[target_r]`, as a 1-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Validation(format!(
                    "target class {t} outside [0, {c})"
                )));
            }
            let row = lv.row(r);
            let (am, m) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (i, x)| if x > a.1 { (i, x) } else { a });
            // log Σ exp(x − m) = log1p(Σ_{j≠argmax} exp(x_j − m)), exact near saturation.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != am)
                .map(|(_, x)| (x - m).exp())
                .sum();
            loss += (m - row[t]) + rest.ln_1p();
            softmax_in_place(probs.row_mut(r));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagate from the scalar `loss`, adding parameter gradients into
    /// `store`. Returns the number of nodes visited.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<usize> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = Tensor::zeros(av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
                    let mut gb = Tensor::zeros(bv.shape());
                    gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, b) => {
                    let bshape = self.value(*b).shape().to_vec();
                    let mut gb = Tensor::zeros(&bshape);
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MulConst(x, c) => {
                    let mut gx = g;
                    for (gg, cc) in gx.data_mut().iter_mut().zip(c.data()) {
                        *gg *= cc;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    for (gg, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *gg *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Map { x, df } => {
                    let mut gx = g;
                    for (gg, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *gg *= df(xv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = xhat.cols();
                    let gam = self.value(*gamma).data();
                    let mut gg = Tensor::zeros(self.value(*gamma).shape());
                    let mut gbeta = Tensor::zeros(self.value(*beta).shape());
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for r in 0..xhat.rows() {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            gg.data_mut()[j] += gr[j] * xh[j];
                            gbeta.data_mut()[j] += gr[j];
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            out[j] = rstd[r] * (d - sum_d / c as f64 - xh[j] * sum_dx / c as f64);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    prefix,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let h = qv.cols();
                    let dh = h / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let plen = prefix.as_ref().map_or(0, |p| p.keys.rows());
                    let mut gq = Tensor::zeros(qv.shape());
                    let mut gk = Tensor::zeros(kv.shape());
                    let mut gv = Tensor::zeros(vv.shape());
                    let mut dp = Vec::new();
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let width = plen + len;
                        for hd in 0..*heads {
                            let off = hd * dh;
                            let pm = &probs[s * heads + hd];
                            dp.clear();
                            dp.resize(width, 0.0);
                            for i in 0..len {
                                let go = &g.row(start + i)[off..off + dh];
                                let prow = &pm[i * width..(i + 1) * width];
                                // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                                let mut dot = 0.0;
                                for j in plen..width {
                                    let p = prow[j];
                                    if p == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let r = start + j - plen;
                                    let vj = &vv.row(r)[off..off + dh];
                                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot += p * dp[j];
                                    let gvj = &mut gv.row_mut(r)[off..off + dh];
                                    for (a, b) in gvj.iter_mut().zip(go) {
                                        *a += p * b;
                                    }
                                }
                                for j in 0..plen {
                                    let vj = &prefix.as_ref().unwrap().values.row(j)[off..off + dh];
                                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot += prow[j] * dp[j];
                                }
                                // dS_ij = P_ij (dP_ij - Σ_l P_il dP_il)
                                let qi: Vec<f64> = qv.row(start + i)[off..off + dh].to_vec();
                                for j in 0..width {
                                    let p = prow[j];
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let ds = p * (dp[j] - dot) * scale;
                                    let kj = if j < plen {
                                        &prefix.as_ref().unwrap().keys.row(j)[off..off + dh]
                                    } else {
                                        &kv.row(start + j - plen)[off..off + dh]
                                    };
                                    let gqi = &mut gq.row_mut(start + i)[off..off + dh];
                                    for (a, b) in gqi.iter_mut().zip(kj) {
                                        *a += ds * b;
                                    }
                                    if j >= plen {
                                        let gkj = &mut gk.row_mut(start + j - plen)[off..off + dh];
                                        for (a, b) in gkj.iter_mut().zip(&qi) {
                                            *a += ds * b;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut gp = Tensor::zeros(pv.shape());
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let gp =
                            Tensor::new(pv.shape().to_vec(), g.data()[off..off + n].to_vec())?;
                        off += n;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::GatherRows(x, idx) => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMean(x, segments) => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let gs = g.row(s);
                        for r in start..start + len {
                            for (a, b) in gx.row_mut(r).iter_mut().zip(gs) {
                                *a += b / len as f64;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshaped(self.value(*x).shape().to_vec())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.data()[0];
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.row_mut(r)[t] -= 1.0;
                    }
                    gl.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(visited)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.constant(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn cross_entropy_of_uniform_pair_is_ln2() {
        let mut t = Tape::new();
        let l = var(&mut t, 1, 2, vec![0.3, 0.3]);
        let ce = t.cross_entropy(l, &[1]).unwrap();
        assert!((t.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut t = Tape::new();
        let l = var(&mut t, 1, 2, vec![10.0, -10.0]);
        let ce = t.cross_entropy(l, &[0]).unwrap();
        // -log sigmoid(20) = log(1 + e^-20)
        let want = (-20f64).exp().ln_1p();
        assert!((t.value(ce).data()[0] - want).abs() < 1e-20);
        assert!((want - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        let mut t = Tape::new();
        let l = var(&mut t, 1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(t.cross_entropy(l, &[0]), Err(Error::Numeric(_))));
        let l = var(&mut t, 1, 2, vec![0.0, 0.0]);
        assert!(t.cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let mut t = Tape::new();
        let q = var(&mut t, 1, 4, vec![0.1, -0.2, 0.3, 0.9]);
        let k = var(&mut t, 1, 4, vec![1.0, 2.0, -1.0, 0.0]);
        let v = var(&mut t, 1, 4, vec![5.0, 6.0, 7.0, 8.0]);
        let o = t.attention(q, k, v, 2, vec![(0, 1)], true, None).unwrap();
        assert_eq!(t.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn causal_rows_sum_to_one_and_mask_is_exact() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let q = var(&mut t, 6, 4, data.clone());
        let k = var(&mut t, 6, 4, data.iter().rev().copied().collect());
        let v = var(&mut t, 6, 4, data);
        let o = t
            .attention(q, k, v, 2, vec![(0, 4), (4, 2)], true, None)
            .unwrap();
        for (n, pm) in t.attention_weights(o).unwrap().iter().enumerate() {
            let len = if n < 2 { 4 } else { 2 };
            for i in 0..len {
                let row = &pm[i * len..(i + 1) * len];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap());
        let mut t = Tape::new();
        let x = var(&mut t, 1, 2, vec![0.2, 0.7]);
        let wv = t.param(&store, w);
        let h = t.matmul(x, wv).unwrap();
        let ce = t.cross_entropy(h, &[0]).unwrap();
        assert_eq!(t.backward(ce, &mut store).unwrap(), 4);
    }
}
