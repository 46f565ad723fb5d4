//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! The operation set is deliberately closed: affine maps, the two hidden
//! activations, softmax cross-entropy, reductions, the elementwise maps used
//! by the unlearning objective, and the fused Gaussianization / kernel ops.
//! Every op checks its output for non-finite values and fails with the op
//! name, so a blown-up objective is reported where it happened.

use crate::error::{Error, Result};
use crate::gaussianize;
use crate::nn::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Log1p(usize),
    Square(usize),
    Mean(usize),
    Sum(usize),
    AbsSum(usize),
    CrossEntropy(usize, Vec<usize>),
    SoftCdf(usize, f64),
    ClampedProbit(usize),
    Mmd(usize, usize),
    WeightedMean(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Op-specific forward cache (softmax probabilities, clamp mask, ...).
    cache: Vec<f64>,
}

/// A recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let t = &tape.nodes[v.0].value;
                Tensor::zeros(t.rows(), t.cols())
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op, cache: Vec<f64>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mmd(a, b)
            | Op::WeightedMean(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Log1p(a)
            | Op::Square(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::AbsSum(a)
            | Op::CrossEntropy(a, _)
            | Op::SoftCdf(a, _)
            | Op::ClampedProbit(a) => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad, cache });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true, cache: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false, cache: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        self.push(out, Op::MatMul(a.0, b.0), Vec::new(), "matmul")
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.val(a), self.val(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::dim(format!(
                "add_row: {:?} + {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % c])
            .collect();
        let out = Tensor::raw(x.rows(), c, data);
        self.push(out, Op::AddRow(a.0, row.0), Vec::new(), "add_row")
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(format!(
                "{name}: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.val(a).clone();
        out.add_assign(self.val(b));
        self.push(out, Op::Add(a.0, b.0), Vec::new(), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::raw(x.rows(), x.cols(), data);
        self.push(out, Op::Sub(a.0, b.0), Vec::new(), "sub")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.val(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c), Vec::new(), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(f64::tanh);
        self.push(out, Op::Tanh(a.0), Vec::new(), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.0), Vec::new(), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(softplus);
        self.push(out, Op::Softplus(a.0), Vec::new(), "softplus")
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        if self.val(a).data().iter().any(|&v| v <= -1.0) {
            return Err(Error::Numeric { op: "log1p" });
        }
        let out = self.val(a).map(f64::ln_1p);
        self.push(out, Op::Log1p(a.0), Vec::new(), "log1p")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|v| v * v);
        self.push(out, Op::Square(a.0), Vec::new(), "square")
    }

    /// Mean over all entries, `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a.0), Vec::new(), "mean")
    }

    /// Sum over all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a.0), Vec::new(), "sum")
    }

    /// L1 norm over all entries, `1 x 1`.
    pub fn abs_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().map(|v| v.abs()).sum::<f64>();
        self.push(Tensor::scalar(s), Op::AbsSum(a.0), Vec::new(), "abs_sum")
    }

    /// Per-sample softmax cross-entropy; logits `n x C` to losses `n x 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let (n, c) = (t.rows(), t.cols());
        if labels.len() != n {
            return Err(Error::dim(format!("cross_entropy: {n} rows, {} labels", labels.len())));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut losses = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Label { label: y, classes: c });
            }
            let row = t.row_slice(i);
            let (loss, p) = softmax_ce(row, y);
            losses.push(loss);
            probs.extend(p);
        }
        self.push(
            Tensor::column(losses),
            Op::CrossEntropy(logits.0, labels.to_vec()),
            probs,
            "cross_entropy",
        )
    }

    /// Soft empirical CDF of a column vector.
    pub fn soft_cdf(&mut self, x: Var, k: f64) -> Result<Var> {
        let q = gaussianize::soft_cdf_values(self.val(x).data(), k);
        self.push(Tensor::column(q), Op::SoftCdf(x.0, k), Vec::new(), "soft_cdf")
    }

    /// Clamp into `[eps, 1-eps]` then apply the standard normal quantile.
    pub fn clamped_probit(&mut self, q: Var, eps: f64) -> Result<Var> {
        let t = self.val(q);
        let mut mask = Vec::with_capacity(t.len());
        let z = t.map(|v| {
            let c = v.clamp(eps, 1.0 - eps);
            gaussianize::probit(c)
        });
        for &v in t.data() {
            mask.push(if v < eps || v > 1.0 - eps { 0.0 } else { 1.0 });
        }
        self.push(z, Op::ClampedProbit(q.0), mask, "probit")
    }

    /// Biased Gaussian-kernel MMD between two column vectors, `1 x 1`.
    pub fn mmd(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = gaussianize::mmd_values(self.val(a).data(), self.val(b).data())?;
        self.push(Tensor::scalar(v), Op::Mmd(a.0, b.0), Vec::new(), "mmd")
    }

    /// `sum_j w_j x_j / sum_j w_j` over the rows of `x`; weights `n x 1`.
    pub fn weighted_mean(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wt, xt) = (self.val(w), self.val(x));
        if wt.cols() != 1 || wt.rows() != xt.rows() {
            return Err(Error::dim(format!(
                "weighted_mean: weights {:?}, rows {:?}",
                wt.shape(),
                xt.shape()
            )));
        }
        let s: f64 = wt.data().iter().sum();
        if s == 0.0 {
            return Err(Error::Numeric { op: "weighted_mean" });
        }
        let out = wt.t_matmul(xt).map(|v| v / s);
        self.push(out, Op::WeightedMean(w.0, x.0), vec![s], "weighted_mean")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        let ov = self.val(out);
        if ov.len() != 1 {
            return Err(Error::dim(format!("backward from non-scalar {:?}", ov.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |idx: usize, delta: Tensor| {
            if !self.nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |idx: usize| self.nodes[idx].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(&self.nodes[*b].value));
                }
                if needs(*b) {
                    acc(*b, self.nodes[*a].value.t_matmul(g));
                }
            }
            Op::AddRow(a, b) => {
                if needs(*b) {
                    let c = g.cols();
                    let mut row = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (acc_v, v) in row.iter_mut().zip(g.row_slice(r)) {
                            *acc_v += v;
                        }
                    }
                    acc(*b, Tensor::row(row));
                }
                acc(*a, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Tanh(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, zip_map(g, x, |gv, xv| gv * sigmoid(xv)));
            }
            Op::Log1p(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, zip_map(g, x, |gv, xv| gv / (1.0 + xv)));
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, zip_map(g, x, |gv, xv| 2.0 * gv * xv));
            }
            Op::Mean(a) => {
                let x = &self.nodes[*a].value;
                let v = g.item() / x.len() as f64;
                acc(*a, Tensor::filled(x.rows(), x.cols(), v));
            }
            Op::Sum(a) => {
                let x = &self.nodes[*a].value;
                acc(*a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::AbsSum(a) => {
                let x = &self.nodes[*a].value;
                let gv = g.item();
                acc(*a, x.map(|v| gv * sign(v)));
            }
            Op::CrossEntropy(a, labels) => {
                let x = &self.nodes[*a].value;
                let c = x.cols();
                let mut d = node.cache.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                    let gi = g.data()[i];
                    for v in &mut d[i * c..(i + 1) * c] {
                        *v *= gi;
                    }
                }
                acc(*a, Tensor::raw(x.rows(), c, d));
            }
            Op::SoftCdf(a, k) => {
                let x = self.nodes[*a].value.data();
                let d = gaussianize::soft_cdf_vjp(x, *k, g.data());
                acc(*a, Tensor::column(d));
            }
            Op::ClampedProbit(a) => {
                let z = node.value.data();
                let d: Vec<f64> = z
                    .iter()
                    .zip(g.data())
                    .zip(&node.cache)
                    .map(|((&zv, &gv), &m)| if m == 0.0 { 0.0 } else { gv / gaussianize::normal_pdf(zv) })
                    .collect();
                let x = &self.nodes[*a].value;
                acc(*a, Tensor::raw(x.rows(), x.cols(), d));
            }
            Op::Mmd(a, b) => {
                let (xa, xb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let (da, db) = gaussianize::mmd_grad(xa, xb);
                let gv = g.item();
                if needs(*a) {
                    acc(*a, Tensor::column(da.into_iter().map(|v| v * gv).collect()));
                }
                if needs(*b) {
                    acc(*b, Tensor::column(db.into_iter().map(|v| v * gv).collect()));
                }
            }
            Op::WeightedMean(w, x) => {
                let s = node.cache[0];
                let xs = &self.nodes[*x].value;
                let blend = &node.value;
                if needs(*w) {
                    // d out_c / d w_j = (x_jc - out_c) / s
                    let d: Vec<f64> = (0..xs.rows())
                        .map(|j| {
                            xs.row_slice(j)
                                .iter()
                                .zip(blend.data())
                                .zip(g.data())
                                .map(|((xv, bv), gv)| gv * (xv - bv) / s)
                                .sum()
                        })
                        .collect();
                    acc(*w, Tensor::column(d));
                }
                if needs(*x) {
                    let wt = self.nodes[*w].value.data();
                    let mut d = Vec::with_capacity(xs.len());
                    for &wj in wt {
                        d.extend(g.data().iter().map(|gv| gv * wj / s));
                    }
                    acc(*x, Tensor::raw(xs.rows(), xs.cols(), d));
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::raw(a.rows(), a.cols(), data)
}

/// Returns `(-log softmax(row)[y], softmax(row))`.
pub(crate) fn softmax_ce(row: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (row[y] - m);
    (loss.max(0.0), exps.into_iter().map(|e| e / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(3.0));
        let y = t.square(w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(&t, w).item(), 6.0);
    }

    #[test]
    fn constant_inputs_get_zero_grad() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(&t, w).item(), 0.0);
    }

    #[test]
    fn reused_node_accumulates() {
        // f = x*x + x via add(square(x), x)
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.5));
        let sq = t.square(x).unwrap();
        let f = t.add(sq, x).unwrap();
        let g = t.backward(f).unwrap();
        assert!((g.wrt(&t, x).item() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1e100));
        let y = t.square(x).unwrap();
        let err = t.square(y).unwrap_err();
        assert!(matches!(err, Error::Numeric { op: "square" }), "{err}");
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(1, 3));
        assert!(matches!(t.cross_entropy(x, &[3]), Err(Error::Label { label: 3, classes: 3 })));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }
}
