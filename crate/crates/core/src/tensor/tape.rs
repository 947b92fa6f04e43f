use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEFF: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Leaf {
    Constant,
    Input,
    Param { name: String, frozen: bool },
}

#[derive(Debug)]
enum Op {
    Leaf(Leaf),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRows {
        x: Var,
        rows: Var,
    },
    Prepend {
        x: Var,
        prefix: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    MeanPool(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// One entry per trainable parameter bound on the tape.
    pub params: BTreeMap<String, Tensor>,
    /// Gradient with respect to the tape's input leaf, if one was declared.
    pub input: Option<Tensor>,
}

/// Ordered record of forward operations; consumed by a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    input: Option<Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(Leaf::Constant), false)
    }

    /// The graph input; its gradient is reported by `backward`. At most one per tape.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        if self.input.is_some() {
            return Err(Error::Protocol("tape already has an input leaf".into()));
        }
        let var = self.push(value, Op::Leaf(Leaf::Input), true);
        self.input = Some(var);
        Ok(var)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Var {
        self.push(
            value,
            Op::Leaf(Leaf::Param {
                name: name.into(),
                frozen,
            }),
            !frozen,
        )
    }

    /// Binds a named parameter of `set`, respecting its freeze flag.
    pub fn bind(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        let p = set.get(name)?;
        Ok(self.param(name, p.value.clone(), p.frozen))
    }

    /// `x · w (+ b)` over the trailing dimension of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "linear weight must be 2-d, got {:?}",
                wv.shape()
            )));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != din {
            let mut expected = xv.shape().to_vec();
            *expected.last_mut().unwrap() = din;
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected,
                found: xv.shape().to_vec(),
            });
        }
        let rows = xv.len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape("linear bias", &[dout])?;
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), wv.data(), rows, din, dout, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        bv.expect_shape("add", av.shape())?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        bv.expect_shape("mul", av.shape())?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds `rows: [T, d]` to every batch element of `x: [B, T, d]`.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(rows));
        let (_, t, d) = dims3("add_rows", xv)?;
        rv.expect_shape("add_rows", &[t, d])?;
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(t * d) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(rows);
        Ok(self.push(value, Op::AddRows { x, rows }, rg))
    }

    /// Prepends `prefix: [P, d]` to the sequence of every batch element of `x: [B, T, d]`.
    pub fn prepend(&mut self, x: Var, prefix: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(prefix));
        let (b, t, d) = dims3("prepend", xv)?;
        if pv.shape().len() != 2 || pv.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                op: "prepend",
                expected: vec![pv.shape()[0], d],
                found: pv.shape().to_vec(),
            });
        }
        let p = pv.shape()[0];
        let mut data = Vec::with_capacity(b * (p + t) * d);
        for chunk in xv.data().chunks(t * d) {
            data.extend_from_slice(pv.data());
            data.extend_from_slice(chunk);
        }
        let value = Tensor::new(vec![b, p + t, d], data)?;
        let rg = self.rg(x) || self.rg(prefix);
        Ok(self.push(value, Op::Prepend { x, prefix }, rg))
    }

    /// Layer normalization over the trailing dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        self.value(gain).expect_shape("layer_norm gain", &[d])?;
        self.value(bias).expect_shape("layer_norm bias", &[d])?;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    /// Single-head scaled dot-product self-attention over `[B, T, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (b, t, d) = dims3("attention", self.value(q))?;
        self.value(k).expect_shape("attention key", &[b, t, d])?;
        self.value(v).expect_shape("attention value", &[b, t, d])?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; b * t * t];
        let mut out = vec![0.0; b * t * d];
        {
            let (qd, kd, vd) = (
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
            );
            for bi in 0..b {
                let off = bi * t * d;
                let p = &mut probs[bi * t * t..(bi + 1) * t * t];
                matmul_a_bt(&qd[off..off + t * d], &kd[off..off + t * d], t, d, t, p);
                for row in p.chunks_mut(t) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(row);
                }
                matmul_acc(
                    p,
                    &vd[off..off + t * d],
                    t,
                    t,
                    d,
                    &mut out[off..off + t * d],
                );
            }
        }
        let value = Tensor::new(vec![b, t, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, Op::Attention { q, k, v, probs }, rg))
    }

    /// Mean over the token axis: `[B, T, d] -> [B, d]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, d) = dims3("mean_pool", xv)?;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &xv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanPool(x), rg))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        data.chunks_mut(d).for_each(softmax_in_place);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Batch-mean softmax cross-entropy of `[B, C]` logits; the result has shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![labels.len(), lv.last_dim()],
                found: lv.shape().to_vec(),
            });
        }
        let c = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            if label >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            loss += neg_log_softmax(row, label);
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from `output`, seeded with `output_grad`. Consumes the tape.
    pub fn backward(&mut self, output: Var, output_grad: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        output_grad.expect_shape("backward", self.value(output).shape())?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(output_grad.data().to_vec());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[idx].op, Op::Leaf(_)) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Leaf(Leaf::Param {
                    name,
                    frozen: false,
                }) => {
                    let g = grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    if let Some(prev) = out.params.get_mut(name) {
                        for (a, b) in prev.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    } else {
                        out.params.insert(name.clone(), t);
                    }
                }
                Op::Leaf(Leaf::Input) => {
                    let g = grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    out.input = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                if self.rg(*x) {
                    let gx = slot(grads, *x, xv.len());
                    matmul_a_bt(g, wv.data(), rows, dout, din, gx);
                }
                if self.rg(*w) {
                    let gw = slot(grads, *w, wv.len());
                    matmul_at_b(xv.data(), g, rows, din, dout, gw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let gb = slot(grads, b, dout);
                    for row in g.chunks(dout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                // a and b may be the same node, so accumulate each side separately.
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRows { x, rows } => {
                if self.rg(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
                if self.rg(*rows) {
                    let n = self.value(*rows).len();
                    let gr = slot(grads, *rows, n);
                    for chunk in g.chunks(n) {
                        accumulate(gr, chunk);
                    }
                }
            }
            Op::Prepend { x, prefix } => {
                let shape = self.value(*x).shape();
                let (t, d) = (shape[1], shape[2]);
                let p = self.value(*prefix).shape()[0];
                let span = (p + t) * d;
                if self.rg(*x) {
                    let gx = slot(grads, *x, shape[0] * t * d);
                    for (dst, src) in gx.chunks_mut(t * d).zip(g.chunks(span)) {
                        accumulate(dst, &src[p * d..]);
                    }
                }
                if self.rg(*prefix) {
                    let gp = slot(grads, *prefix, p * d);
                    for src in g.chunks(span) {
                        accumulate(gp, &src[..p * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot(grads, *bias, d);
                    for grow in g.chunks(d) {
                        accumulate(gb, grow);
                    }
                }
                if self.rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    let n = d as f64;
                    for (r, ((grow, hrow), xrow)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let is = inv_std[r];
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            xrow[j] += is / n * (n * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *o += gi * gelu_grad(v);
                }
            }
            Op::Attention { q, k, v, probs } => {
                let shape = self.value(*q).shape();
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut gq = vec![0.0; b * t * d];
                let mut gk = vec![0.0; b * t * d];
                let mut gv = vec![0.0; b * t * d];
                let mut dp = vec![0.0; t * t];
                for bi in 0..b {
                    let off = bi * t * d;
                    let p = &probs[bi * t * t..(bi + 1) * t * t];
                    let go = &g[off..off + t * d];
                    // dV = P^T dO
                    matmul_at_b(p, go, t, t, d, &mut gv[off..off + t * d]);
                    // dP = dO V^T
                    dp.iter_mut().for_each(|x| *x = 0.0);
                    matmul_a_bt(go, &vd[off..off + t * d], t, d, t, &mut dp);
                    // dS = P * (dP - rowsum(dP * P)), then scale
                    for (prow, dprow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                        for (ds, &pv) in dprow.iter_mut().zip(prow) {
                            *ds = pv * (*ds - dot) * scale;
                        }
                    }
                    matmul_acc(
                        &dp,
                        &kd[off..off + t * d],
                        t,
                        t,
                        d,
                        &mut gq[off..off + t * d],
                    );
                    matmul_at_b(
                        &dp,
                        &qd[off..off + t * d],
                        t,
                        t,
                        d,
                        &mut gk[off..off + t * d],
                    );
                }
                for (var, gsrc) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.rg(var) {
                        accumulate(slot(grads, var, gsrc.len()), &gsrc);
                    }
                }
            }
            Op::MeanPool(x) => {
                let shape = self.value(*x).shape();
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let inv = 1.0 / t as f64;
                let gx = slot(grads, *x, b * t * d);
                for bi in 0..b {
                    let grow = &g[bi * d..(bi + 1) * d];
                    for ti in 0..t {
                        let dst = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        for (o, gi) in dst.iter_mut().zip(grow) {
                            *o += gi * inv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), orow) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        orow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                let gl = slot(grads, *logits, probs.len());
                for (r, (prow, &label)) in probs.chunks(c).zip(labels).enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl[r * c + j] += (prow[j] - onehot) * scale;
                    }
                }
            }
        }
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, s, d] => Ok((b, s, d)),
        _ => Err(Error::InvalidShape(format!(
            "{op} expects a [batch, tokens, width] tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += a[m x n] * b[k x n]^T`
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-log softmax(row)[label]` via log-sum-exp.
pub(crate) fn neg_log_softmax(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_linear() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = tape.param("w", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_reports_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let w = tape.param("w", Tensor::zeros(&[2, 2]), false);
        let err = tape.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[1, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input.unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input.unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn replay_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.backward(y, &Tensor::scalar(1.0)),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn output_grad_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y, &Tensor::scalar(1.0)),
            Err(Error::ShapeMismatch { .. })
        ));
        // a rejected seed does not consume the tape
        assert!(tape.backward(y, &t(&[2], &[1.0, 1.0])).is_ok());
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2, 2], &[0.3, -0.2, 0.5, 1.0])).unwrap();
        let w = tape.param("w", t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]), false);
        let g_ = tape.param("g", t(&[2], &[1.0, 1.0]), false);
        let b_ = tape.param("b", t(&[2], &[0.0, 0.0]), false);
        let h = tape.linear(x, w, None).unwrap();
        let n = tape.layer_norm(h, g_, b_).unwrap();
        let a = tape.attention(n, n, n).unwrap();
        let y = tape.gelu(a).unwrap();
        let grads = tape.backward(y, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(grads.input.unwrap().data().iter().all(|v| *v == 0.0));
        for g in grads.params.values() {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn frozen_params_pass_gradient_through() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[1.0, -1.0])).unwrap();
        let w = tape.param("w", t(&[2, 1], &[2.0, 3.0]), true);
        let y = tape.linear(x, w, None).unwrap();
        let g = tape.backward(y, &t(&[1, 1], &[1.0])).unwrap();
        assert!(g.params.is_empty());
        assert_eq!(g.input.unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn stable_softmax_for_large_logits() {
        let mut row = [1000.0, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row[0], 1.0);
        assert!(neg_log_softmax(&[1000.0, 0.0], 0).abs() < 1e-300);
    }
}
