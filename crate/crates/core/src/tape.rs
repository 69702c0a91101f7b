//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and, when any of
//! its inputs is tracked, enough context to apply its adjoint. `backward`
//! replays the adjoints in exact reverse execution order.

use crate::autocorr::{aggregate, AggregateEncoding, LagTable};
use crate::error::{Error, Result};
use crate::series::{self, Scratch};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place, Tensor};

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Linear(Var, Var),
    Relu(Var),
    MaskMul(Var, Vec<f64>),
    MovingAverage(Var, usize),
    Sum(Var),
    Mse(Var, Tensor),
    Softmax { x: Var, axis: usize },
    Correlation(Var, Var),
    MeanColumns(Var),
    GatherLags { corr: Var, lags: LagTable },
    Aggregate { v: Var, weights: Var, lags: LagTable },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ResizeTime { x: Var, from: usize },
    SliceTime { x: Var, start: usize, from: usize },
    ConcatTime { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
pub struct GradientTape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`GradientTape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it was unreachable or untracked.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Tensor::new(self.shapes[var.0].clone(), g.clone()).ok()
    }

    /// Gradient data, zeros when the variable never received any.
    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        match self.grads.get(var.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[var.0].iter().product()],
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        GradientTape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Untracked leaf (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn any_tracked(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("sub", out, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())?;
        self.record("scale", out, &[a], Op::Scale(a, s))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::shape("mask_mul", "mask length differs from input"));
        }
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("mask_mul", out, &[a], Op::MaskMul(a, mask))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        if xv.shape().last() != Some(&n) || bv.shape().len() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.record("add_bias", out, &[x, bias], Op::AddBias(x, bias))
    }

    /// `x[..., k] · w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (k, n) = match wv.shape() {
            &[k, n] => (k, n),
            s => return Err(Error::shape("linear", format!("weight must be 2-d, got {s:?}"))),
        };
        if xv.shape().last() != Some(&k) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} against weight [{k}, {n}]", xv.shape()),
            ));
        }
        let m = xv.len() / k.max(1);
        let mut data = vec![0.0; m * n];
        gemm_acc(xv.data(), wv.data(), &mut data, m, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        self.record("linear", out, &[x, w], Op::Linear(x, w))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())?;
        self.record("relu", out, &[a], Op::Relu(a))
    }

    pub fn moving_average(&mut self, a: Var, w: usize) -> Result<Var> {
        let out = series::moving_average(self.value(a), w)?;
        self.record("moving_average", out, &[a], Op::MovingAverage(a, w))
    }

    /// `(seasonal, trend)` with `seasonal = x - moving_average(x)`.
    pub fn series_decomp(&mut self, a: Var, w: usize) -> Result<(Var, Var)> {
        let trend = self.moving_average(a, w)?;
        let seasonal = self.sub(a, trend)?;
        Ok((seasonal, trend))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        same_shape("mse", p, target)?;
        let n = p.len() as f64;
        let s: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        self.record("mse", Tensor::scalar(s / n), &[pred], Op::Mse(pred, target.clone()))
    }

    /// Softmax along `axis` of a 3-d tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis, "softmax")?;
        let mut data = x.data().to_vec();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = data[(o * n + j) * inner + i];
                }
                softmax_in_place(&mut buf);
                for j in 0..n {
                    data[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("softmax", out, &[a], Op::Softmax { x: a, axis })
    }

    /// Column-wise circular cross-correlation of `[B, L, C]` tensors.
    pub fn correlation(&mut self, q: Var, k: Var) -> Result<Var> {
        let out = series::correlate_columns(self.value(q), self.value(k))?;
        self.record("correlation", out, &[q, k], Op::Correlation(q, k))
    }

    /// Mean over batch and channel: `[B, L, C] -> [1, L, 1]`.
    pub fn mean_columns(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (b, l, c) = x.dims3("mean_columns")?;
        let mut data = vec![0.0; l];
        for bi in 0..b {
            for t in 0..l {
                let row = &x.data()[(bi * l + t) * c..(bi * l + t + 1) * c];
                data[t] += row.iter().sum::<f64>();
            }
        }
        let denom = (b * c) as f64;
        data.iter_mut().for_each(|v| *v /= denom);
        let out = Tensor::new(vec![1, l, 1], data)?;
        self.record("mean_columns", out, &[a], Op::MeanColumns(a))
    }

    /// `out[b, i, c] = corr[b, lags[b, i, c], c]`; indices are constants.
    pub fn gather_lags(&mut self, corr: Var, lags: LagTable) -> Result<Var> {
        let x = self.value(corr);
        let (b, l, c) = x.dims3("gather_lags")?;
        if lags.batch() != b || lags.channels() != c {
            return Err(Error::shape("gather_lags", "lag table does not match correlation tensor"));
        }
        let k = lags.k();
        let mut data = vec![0.0; b * k * c];
        for bi in 0..b {
            for i in 0..k {
                for ch in 0..c {
                    let tau = lags.get(bi, i, ch);
                    if tau >= l {
                        return Err(Error::invalid(format!("lag {tau} outside [0, {l})")));
                    }
                    data[(bi * k + i) * c + ch] = x.at3(bi, tau, ch);
                }
            }
        }
        let out = Tensor::new(vec![b, k, c], data)?;
        self.record("gather_lags", out, &[corr], Op::GatherLags { corr, lags })
    }

    /// Time-delay aggregation `Σ_i w_i · Roll(V, τ_i)`.
    pub fn aggregate(&mut self, v: Var, weights: Var, lags: LagTable, encoding: AggregateEncoding) -> Result<Var> {
        let out = aggregate(self.value(v), self.value(weights).data(), &lags, encoding)?;
        self.record("aggregate", out, &[v, weights], Op::Aggregate { v, weights, lags })
    }

    /// Scaled dot-product attention per head, no mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, l, c) = qv.dims3("attention")?;
        let (bk, _, ck) = kv.dims3("attention")?;
        if vv.shape() != kv.shape() || bk != b || ck != c {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("attention", format!("{c} channels over {heads} heads")));
        }
        let keep = self.any_tracked(&[q, k, v]);
        let (out, probs) = attention_forward(qv, kv, vv, heads, keep);
        let out = Tensor::new(vec![b, l, c], out)?;
        self.record("attention", out, &[q, k, v], Op::Attention { q, k, v, heads, probs })
    }

    /// Truncate or zero-fill along time to `target` steps.
    pub fn resize_time(&mut self, a: Var, target: usize) -> Result<Var> {
        let x = self.value(a);
        let (b, s, c) = x.dims3("resize_time")?;
        if target == 0 || s == 0 {
            return Err(Error::invalid("resize to or from zero length"));
        }
        let keep = s.min(target);
        let mut data = vec![0.0; b * target * c];
        for bi in 0..b {
            let src = &x.data()[bi * s * c..(bi * s + keep) * c];
            data[bi * target * c..(bi * target + keep) * c].copy_from_slice(src);
        }
        let out = Tensor::new(vec![b, target, c], data)?;
        self.record("resize_time", out, &[a], Op::ResizeTime { x: a, from: s })
    }

    /// Rows `start..start+len` along time.
    pub fn slice_time(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (b, l, c) = x.dims3("slice_time")?;
        if start + len > l {
            return Err(Error::invalid(format!("slice {start}..{} of length {l}", start + len)));
        }
        let mut data = Vec::with_capacity(b * len * c);
        for bi in 0..b {
            data.extend_from_slice(&x.data()[(bi * l + start) * c..(bi * l + start + len) * c]);
        }
        let out = Tensor::new(vec![b, len, c], data)?;
        self.record("slice_time", out, &[a], Op::SliceTime { x: a, start, from: l })
    }

    pub fn concat_time(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (bx, lx, cx) = x.dims3("concat_time")?;
        let (by, ly, cy) = y.dims3("concat_time")?;
        if bx != by || cx != cy {
            return Err(Error::shape("concat_time", format!("{:?} ++ {:?}", x.shape(), y.shape())));
        }
        let mut data = Vec::with_capacity(x.len() + y.len());
        for bi in 0..bx {
            data.extend_from_slice(&x.data()[bi * lx * cx..(bi + 1) * lx * cx]);
            data.extend_from_slice(&y.data()[bi * ly * cy..(bi + 1) * ly * cy]);
        }
        let out = Tensor::new(vec![bx, lx + ly, cx], data)?;
        self.record("concat_time", out, &[a, b], Op::ConcatTime { a, b })
    }

    /// Adjoints of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", out.shape())));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[output.0] = Some(vec![1.0]);
        let mut scratch = Scratch::default();
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.apply_adjoint(node, &g, &mut grads, &mut scratch);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn apply_adjoint(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], scratch: &mut Scratch) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(o, x)| *o += x * f);
                }
            }
            Op::MaskMul(a, mask) => {
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * mask[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                let n = self.value(*bias).len();
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k.max(1);
                if let Some(s) = self.slot(grads, *x) {
                    gemm_nt_acc(g, wv.data(), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *w) {
                    gemm_tn_acc(xv.data(), g, s, m, k, n);
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::MovingAverage(a, w) => {
                let (b, l, c) = node.value.dims3("moving_average").expect("checked on forward");
                if let Some(s) = self.slot(grads, *a) {
                    series::moving_average_adjoint(g, s, b, l, c, *w);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mse(p, target) => {
                let pv = self.value(*p).data();
                let f = 2.0 * g[0] / pv.len() as f64;
                if let Some(s) = self.slot(grads, *p) {
                    for i in 0..pv.len() {
                        s[i] += f * (pv[i] - target.data()[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis, "softmax").expect("checked");
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Correlation(q, k) => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (b, l, c) = qv.dims3("correlation").expect("checked");
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("same shape");
                let mut col = vec![0.0; l];
                let q_tracked = self.nodes[q.0].requires_grad;
                let k_tracked = self.nodes[k.0].requires_grad;
                for bi in 0..b {
                    for ch in 0..c {
                        let gc = gt.column(bi, ch);
                        if q_tracked {
                            col.iter_mut().for_each(|v| *v = 0.0);
                            series::convolve_into(&gc, &kv.column(bi, ch), &mut col, scratch);
                            let s = self.slot(grads, *q).expect("tracked");
                            for t in 0..l {
                                s[(bi * l + t) * c + ch] += col[t];
                            }
                        }
                        if k_tracked {
                            series::correlate_into(&qv.column(bi, ch), &gc, &mut col, scratch);
                            let s = self.slot(grads, *k).expect("tracked");
                            for t in 0..l {
                                s[(bi * l + t) * c + ch] += col[t];
                            }
                        }
                    }
                }
            }
            Op::MeanColumns(a) => {
                let (b, l, c) = self.value(*a).dims3("mean_columns").expect("checked");
                let denom = (b * c) as f64;
                if let Some(s) = self.slot(grads, *a) {
                    for bi in 0..b {
                        for t in 0..l {
                            for ch in 0..c {
                                s[(bi * l + t) * c + ch] += g[t] / denom;
                            }
                        }
                    }
                }
            }
            Op::GatherLags { corr, lags } => {
                let (b, l, c) = self.value(*corr).dims3("gather_lags").expect("checked");
                let k = lags.k();
                if let Some(s) = self.slot(grads, *corr) {
                    for bi in 0..b {
                        for i in 0..k {
                            for ch in 0..c {
                                let tau = lags.get(bi, i, ch);
                                s[(bi * l + tau) * c + ch] += g[(bi * k + i) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::Aggregate { v, weights, lags } => {
                let vv = self.value(*v);
                let wv = self.value(*weights).data();
                let (b, l, c) = vv.dims3("aggregate").expect("checked");
                let k = lags.k();
                if let Some(s) = self.slot(grads, *v) {
                    for bi in 0..b {
                        for i in 0..k {
                            for t in 0..l {
                                for ch in 0..c {
                                    let tau = lags.get(bi, i, ch);
                                    let w = wv[lags.offset(bi, i, ch)];
                                    s[(bi * l + (t + tau) % l) * c + ch] += w * g[(bi * l + t) * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *weights) {
                    let vd = vv.data();
                    for bi in 0..b {
                        for i in 0..k {
                            for t in 0..l {
                                for ch in 0..c {
                                    let tau = lags.get(bi, i, ch);
                                    s[lags.offset(bi, i, ch)] +=
                                        g[(bi * l + t) * c + ch] * vd[(bi * l + (t + tau) % l) * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_adjoint(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::ResizeTime { x, from } => {
                let (b, target, c) = node.value.dims3("resize_time").expect("checked");
                let keep = (*from).min(target);
                if let Some(s) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for t in 0..keep {
                            for ch in 0..c {
                                s[(bi * from + t) * c + ch] += g[(bi * target + t) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::SliceTime { x, start, from } => {
                let (b, len, c) = node.value.dims3("slice_time").expect("checked");
                if let Some(s) = self.slot(grads, *x) {
                    for bi in 0..b {
                        let dst = &mut s[(bi * from + start) * c..(bi * from + start + len) * c];
                        let src = &g[bi * len * c..(bi + 1) * len * c];
                        dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatTime { a, b } => {
                let (bx, lx, c) = self.value(*a).dims3("concat_time").expect("checked");
                let ly = self.value(*b).shape()[1];
                let total = lx + ly;
                if let Some(s) = self.slot(grads, *a) {
                    for bi in 0..bx {
                        let src = &g[bi * total * c..(bi * total + lx) * c];
                        s[bi * lx * c..(bi + 1) * lx * c].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for bi in 0..bx {
                        let src = &g[(bi * total + lx) * c..(bi + 1) * total * c];
                        s[bi * ly * c..(bi + 1) * ly * c].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_adjoint(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, l, c) = qv.dims3("attention").expect("checked");
        let s_len = kv.shape()[1];
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        for bi in 0..b {
            for h in 0..heads {
                let qh = head_block(qv.data(), bi, l, c, h, dh);
                let kh = head_block(kv.data(), bi, s_len, c, h, dh);
                let vh = head_block(vv.data(), bi, s_len, c, h, dh);
                let go = head_block(g, bi, l, c, h, dh);
                let p = &probs[(bi * heads + h) * l * s_len..(bi * heads + h + 1) * l * s_len];

                let mut dv = vec![0.0; s_len * dh];
                gemm_tn_acc(p, &go, &mut dv, l, s_len, dh);
                let mut dp = vec![0.0; l * s_len];
                gemm_nt_acc(&go, &vh, &mut dp, l, dh, s_len);
                for i in 0..l {
                    let row = i * s_len..(i + 1) * s_len;
                    let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                let mut dq = vec![0.0; l * dh];
                gemm_acc(&dp, &kh, &mut dq, l, s_len, dh);
                let mut dk = vec![0.0; s_len * dh];
                gemm_tn_acc(&dp, &qh, &mut dk, l, s_len, dh);

                scatter_head(&mut gq, &dq, bi, l, c, h, dh);
                scatter_head(&mut gk, &dk, bi, s_len, c, h, dh);
                scatter_head(&mut gv, &dv, bi, s_len, c, h, dh);
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(s) = self.slot(grads, var) {
                s.iter_mut().zip(&grad).for_each(|(o, x)| *o += x);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    if shape[axis] == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    Ok((outer, shape[axis], inner))
}

fn head_block(data: &[f64], b: usize, l: usize, c: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l * dh);
    for t in 0..l {
        let start = (b * l + t) * c + h * dh;
        out.extend_from_slice(&data[start..start + dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], b: usize, l: usize, c: usize, h: usize, dh: usize) {
    for t in 0..l {
        let start = (b * l + t) * c + h * dh;
        dst[start..start + dh]
            .iter_mut()
            .zip(&src[t * dh..(t + 1) * dh])
            .for_each(|(o, v)| *o += v);
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, keep_probs: bool) -> (Vec<f64>, Vec<f64>) {
    let (b, l, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let s_len = k.shape()[1];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * l * c];
    let mut probs = if keep_probs { Vec::with_capacity(b * heads * l * s_len) } else { Vec::new() };
    let mut scores = vec![0.0; l * s_len];
    for bi in 0..b {
        for h in 0..heads {
            let qh = head_block(q.data(), bi, l, c, h, dh);
            let kh = head_block(k.data(), bi, s_len, c, h, dh);
            let vh = head_block(v.data(), bi, s_len, c, h, dh);
            scores.iter_mut().for_each(|s| *s = 0.0);
            gemm_nt_acc(&qh, &kh, &mut scores, l, dh, s_len);
            for row in scores.chunks_mut(s_len) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            let mut oh = vec![0.0; l * dh];
            gemm_acc(&scores, &vh, &mut oh, l, s_len, dh);
            scatter_head(&mut out, &oh, bi, l, c, h, dh);
            if keep_probs {
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_gradient;

    #[test]
    fn identity_and_square() {
        let mut tape = GradientTape::new();
        let p = tape.param(Tensor::scalar(3.0));
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0]);

        let sq = tape.mul(p, p).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = GradientTape::new();
        let p = tape.param(Tensor::new(vec![1, 1, 1], vec![0.7]).unwrap());
        let z = tape.constant(Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap());
        let both = tape.concat_time(p, z).unwrap();
        let s = tape.softmax(both, 1).unwrap();
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.get(p).unwrap().data()[0].abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = GradientTape::new();
        let p = tape.param(Tensor::series(&[1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn non_finite_results_are_reported() {
        let mut tape = GradientTape::new();
        let p = tape.param(Tensor::scalar(1e300));
        assert!(matches!(tape.mul(p, p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut tape = GradientTape::inference();
        let p = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(p, p).unwrap();
        assert!(!tape.requires_grad(sq));
        assert!(tape.backward(sq).unwrap().get(p).is_none());
        tape.clear();
        assert!(tape.is_empty());
    }

    /// Checks d(sum(out ⊙ probe))/d(inputs) against central differences.
    fn check_op(inputs: &[Tensor], build: impl Fn(&mut GradientTape, &[Var]) -> Var) {
        let probe_for = |t: &Tensor| -> Tensor {
            let data = (0..t.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let scalar = |vals: &[Tensor]| -> Result<f64> {
            let mut tape = GradientTape::inference();
            let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let probe = probe_for(tape.value(out));
            Ok(tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };

        let mut tape = GradientTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let probe = tape.constant(probe_for(tape.value(out)));
        let prod = tape.mul(out, probe).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();

        for (which, var) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*var);
            let theta = inputs[which].data().to_vec();
            let numeric = finite_difference_gradient(
                |th| {
                    let mut vals = inputs.to_vec();
                    vals[which] = Tensor::new(inputs[which].shape().to_vec(), th.to_vec())?;
                    scalar(&vals)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                assert!(
                    (a - n).abs() <= 1e-6 * (1.0 + a.abs().max(n.abs())),
                    "input {which} coord {i}: analytic {a} numeric {n}"
                );
            }
        }
    }

    fn sample(shape: &[usize], seed: usize) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i + seed) * 7919 % 1000) as f64 / 500.0 - 1.0) * 0.9 + 0.05)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn elementwise_and_linear_adjoints() {
        check_op(&[sample(&[2, 3, 4], 1), sample(&[2, 3, 4], 2)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            let s = t.sub(m, v[0]).unwrap();
            t.scale(s, -1.5).unwrap()
        });
        check_op(&[sample(&[2, 3, 4], 3), sample(&[4, 5], 4), sample(&[5], 5)], |t, v| {
            let y = t.linear(v[0], v[1]).unwrap();
            let y = t.add_bias(y, v[2]).unwrap();
            t.relu(y).unwrap()
        });
    }

    #[test]
    fn time_axis_adjoints() {
        check_op(&[sample(&[2, 9, 3], 6)], |t, v| t.moving_average(v[0], 5).unwrap());
        check_op(&[sample(&[2, 9, 3], 7)], |t, v| t.resize_time(v[0], 5).unwrap());
        check_op(&[sample(&[2, 4, 3], 8)], |t, v| t.resize_time(v[0], 7).unwrap());
        check_op(&[sample(&[2, 9, 3], 9)], |t, v| t.slice_time(v[0], 3, 4).unwrap());
        check_op(&[sample(&[2, 3, 2], 10), sample(&[2, 4, 2], 11)], |t, v| {
            t.concat_time(v[0], v[1]).unwrap()
        });
        check_op(&[sample(&[2, 4, 3], 12)], |t, v| t.softmax(v[0], 1).unwrap());
        check_op(&[sample(&[2, 4, 3], 13)], |t, v| t.softmax(v[0], 2).unwrap());
    }

    #[test]
    fn correlation_and_aggregation_adjoints() {
        check_op(&[sample(&[2, 7, 3], 14), sample(&[2, 7, 3], 15)], |t, v| {
            t.correlation(v[0], v[1]).unwrap()
        });
        check_op(&[sample(&[2, 7, 3], 16)], |t, v| t.mean_columns(v[0]).unwrap());
        let lags = LagTable::new(2, 2, 3, vec![0, 3, 1, 4, 6, 2, 5, 5, 1, 0, 2, 6]).unwrap();
        let l2 = lags.clone();
        check_op(&[sample(&[2, 7, 3], 17)], move |t, v| t.gather_lags(v[0], l2.clone()).unwrap());
        for enc in [AggregateEncoding::Roll, AggregateEncoding::Gather] {
            let l3 = lags.clone();
            check_op(&[sample(&[2, 7, 3], 18), sample(&[2, 2, 3], 19)], move |t, v| {
                t.aggregate(v[0], v[1], l3.clone(), enc).unwrap()
            });
        }
        let global = LagTable::new(1, 3, 1, vec![2, 0, 5]).unwrap();
        check_op(&[sample(&[2, 7, 3], 20), sample(&[1, 3, 1], 21)], move |t, v| {
            t.aggregate(v[0], v[1], global.clone(), AggregateEncoding::Roll).unwrap()
        });
    }

    #[test]
    fn attention_adjoint() {
        check_op(
            &[sample(&[2, 5, 4], 22), sample(&[2, 6, 4], 23), sample(&[2, 6, 4], 24)],
            |t, v| t.attention(v[0], v[1], v[2], 2).unwrap(),
        );
    }

    #[test]
    fn mse_adjoint_matches_closed_form() {
        let target = Tensor::series(&[0.0, 4.0]);
        let mut tape = GradientTape::new();
        let p = tape.param(Tensor::series(&[1.0, 2.0]));
        let loss = tape.mse(p, &target).unwrap();
        assert_eq!(tape.value(loss).data(), &[2.5]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, -2.0]);
    }
}
