//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every batch. Nodes are appended in evaluation
//! order, so parents always precede children and the reverse of the
//! insertion order is a valid topological order for the backward sweep.
//! Every forward op checks its output for non-finite entries and reports the
//! op that produced them.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParameterSet};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · W + b` with `x: [n, i]` (or `[i]`), `W: [i, o]`, `b: [o]`.
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    /// `[n, k] -> [n]`.
    RowSum(Var),
    /// Row-wise softmax.
    Softmax(Var),
    /// Mean over rows of `logsumexp(l) - l[y]`; caches the row softmax.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SliceRows { src: Var, start: usize },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients, filled by [`Graph::backward`].
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.tag() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Softmax(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::SliceRows { src, .. } => vec![*src],
        }
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Differentiable free input, readable through [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds a parameter as a differentiable leaf. Binding the same
    /// parameter twice accumulates both contributions.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Result<Var> {
        let v = self.variable(params.value(id).clone())?;
        self.params.push((id, v));
        Ok(v)
    }

    pub fn param_by_name(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let id = params.id(name)?;
        self.param(params, id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Returns the root value. Values are computed eagerly as nodes are
    /// appended, so this is a lookup.
    pub fn evaluate(&self, root: Var) -> Tensor {
        self.nodes[root.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a node after [`Graph::backward`]; zero when the
    /// node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                op: op.tag(),
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if tw.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (inner, out) = (tw.shape()[0], tw.shape()[1]);
        if tx.shape().len() > 2 || tx.cols() != inner {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        if tb.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: tw.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut data = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let start = data.len();
            data.extend_from_slice(bd);
            let orow = &mut data[start..];
            for (k, &a) in xd[r * inner..(r + 1) * inner].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(&wd[k * out..(k + 1) * out]) {
                    *o += a * wv;
                }
            }
        }
        let shape = if tx.shape().len() == 1 { vec![out] } else { vec![rows, out] };
        self.push(Tensor::new(shape, data)?, Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |v| c * v)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |v| v + c)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::vector(data)?, Op::RowSum(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - m).exp()));
            let z: f64 = data[start..].iter().sum();
            for p in &mut data[start..] {
                *p /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Softmax(a))
    }

    /// Mean cross-entropy of row-wise softmax against class indices, with
    /// log-sum-exp stabilization.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (rows, k) = (t.rows(), t.cols());
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows() != tb.rows() || ta.shape().len() != tb.shape().len() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let shape = if ta.shape().len() == 1 {
            vec![ca + cb]
        } else {
            vec![ta.rows(), ca + cb]
        };
        self.push(Tensor::new(shape, data)?, Op::ConcatCols(a, b))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        if t.shape().len() != 2 || start >= end || end > t.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let value = Tensor::matrix(end - start, c, data)?;
        self.push(value, Op::SliceRows { src, start })
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every
    /// parameter in `params`; parameters not bound into this graph, or not
    /// reachable from `root`, get zeros.
    pub fn backward(&mut self, root: Var, params: &ParameterSet) -> Result<ParamGrads> {
        let shape = self.shape(root);
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NotScalar { shape });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        let mut grads = ParamGrads::zeros_like(params);
        for &(id, v) in &self.params {
            if id.index() >= params.len() {
                return Err(Error::UnknownParameter(format!("#{}", id.index())));
            }
            if let Some(g) = &self.grads[v.0] {
                grads.accumulate(id, g);
            }
        }
        Ok(grads)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce(&mut [f64])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.len();
    delta(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

/// Pushes the gradient `g` of node `i` into its parents.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (inner, out) = {
                let s = nodes[w.0].value.shape();
                (s[0], s[1])
            };
            let rows = nodes[x.0].value.rows();
            let (xd, wd) = (val(*x), val(*w));
            accumulate(nodes, grads, *x, |dx| {
                for r in 0..rows {
                    let grow = &g[r * out..(r + 1) * out];
                    for k in 0..inner {
                        let wrow = &wd[k * out..(k + 1) * out];
                        dx[r * inner + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, *w, |dw| {
                for r in 0..rows {
                    let grow = &g[r * out..(r + 1) * out];
                    for k in 0..inner {
                        let a = xd[r * inner + k];
                        if a == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw[k * out..(k + 1) * out].iter_mut().zip(grow) {
                            *d += a * gv;
                        }
                    }
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for r in 0..rows {
                    add_into(db, &g[r * out..(r + 1) * out]);
                }
            });
        }
        Op::Relu(a) => {
            let xv = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((d, x), gv) in d.iter_mut().zip(xv).zip(g) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            });
        }
        Op::Exp(a) => {
            let yv = nodes[i].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, y), gv) in d.iter_mut().zip(yv).zip(g) {
                    *d += gv * y;
                }
            });
        }
        Op::Log(a) => {
            let xv = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((d, x), gv) in d.iter_mut().zip(xv).zip(g) {
                    *d += gv / x;
                }
            });
        }
        Op::Softplus(a) => {
            let xv = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((d, x), gv) in d.iter_mut().zip(xv).zip(g) {
                    *d += gv * sigmoid(*x);
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for ((d, y), gv) in d.iter_mut().zip(bv).zip(g) {
                    *d += gv * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, x), gv) in d.iter_mut().zip(av).zip(g) {
                    *d += gv * x;
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |d| {
            for (d, gv) in d.iter_mut().zip(g) {
                *d += c * gv;
            }
        }),
        Op::Offset(a) => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::Sum(a) => accumulate(nodes, grads, *a, |d| {
            for d in d.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            accumulate(nodes, grads, *a, |d| {
                for d in d.iter_mut() {
                    *d += g[0] / n;
                }
            });
        }
        Op::RowSum(a) => {
            let c = nodes[a.0].value.cols();
            accumulate(nodes, grads, *a, |d| {
                for (r, gv) in g.iter().enumerate() {
                    for d in &mut d[r * c..(r + 1) * c] {
                        *d += gv;
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let yv = &nodes[i].value;
            let c = yv.cols();
            accumulate(nodes, grads, *a, |d| {
                for r in 0..yv.rows() {
                    let y = yv.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] += y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / n as f64;
            accumulate(nodes, grads, *logits, |d| {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        d[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let ca = nodes[a.0].value.cols();
            let cb = nodes[b.0].value.cols();
            let rows = nodes[a.0].value.rows();
            let w = ca + cb;
            accumulate(nodes, grads, *a, |d| {
                for r in 0..rows {
                    add_into(&mut d[r * ca..(r + 1) * ca], &g[r * w..r * w + ca]);
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for r in 0..rows {
                    add_into(&mut d[r * cb..(r + 1) * cb], &g[r * w + ca..(r + 1) * w]);
                }
            });
        }
        Op::SliceRows { src, start } => {
            let c = nodes[src.0].value.cols();
            let off = start * c;
            accumulate(nodes, grads, *src, |d| add_into(&mut d[off..off + g.len()], g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.evaluate(y), t(&[2], &[1.0, 2.0]));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 3.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_classes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 10])).unwrap();
        let l = g.softmax_cross_entropy(x, &[3]).unwrap();
        assert!((g.scalar(l) - 10f64.ln()).abs() < 1e-12);
        assert!((g.scalar(l) - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[700.0, -700.0, -700.0, 700.0])).unwrap();
        let l = g.softmax_cross_entropy(x, &[1, 1]).unwrap();
        assert!((g.scalar(l) - 700.0).abs() < 1e-9);
        let params = ParameterSet::new();
        g.backward(l, &params).unwrap();
        assert!(g.grad(x).all_finite());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y, &ParameterSet::new()).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
        assert_eq!(g.grad(y).item(), 1.0);
    }

    #[test]
    fn product_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0)).unwrap();
        let y = g.variable(Tensor::scalar(5.0)).unwrap();
        let p = g.mul(x, y).unwrap();
        g.backward(p, &ParameterSet::new()).unwrap();
        assert_eq!(g.grad(x).item(), 5.0);
        assert_eq!(g.grad(y).item(), 2.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2])).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_names_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[-1.0])).unwrap();
        assert_eq!(g.log(a).unwrap_err(), Error::NonFinite { op: "log" });
        let big = g.constant(t(&[1], &[1000.0])).unwrap();
        assert_eq!(g.exp(big).unwrap_err(), Error::NonFinite { op: "exp" });
    }

    #[test]
    fn backward_rejects_vector_root() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[2])).unwrap();
        let err = g.backward(a, &ParameterSet::new()).unwrap_err();
        assert_eq!(err, Error::NotScalar { shape: vec![2] });
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        use crate::params::ParamGroup;
        let mut params = ParameterSet::new();
        let a = params.insert("a", ParamGroup::Encoder, Tensor::scalar(2.0)).unwrap();
        let b = params.insert("b", ParamGroup::Encoder, Tensor::scalar(4.0)).unwrap();
        let mut g = Graph::new();
        let va = g.param(&params, a).unwrap();
        let _vb = g.param(&params, b).unwrap();
        let y = g.square(va).unwrap();
        let grads = g.backward(y, &params).unwrap();
        assert_eq!(grads.get(a).item(), 4.0);
        assert_eq!(grads.get(b).item(), 0.0);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let logits = t(&[1, 3], &[0.2, -1.0, 0.7]);
        let x = g.variable(logits.clone()).unwrap();
        let l = g.softmax_cross_entropy(x, &[2]).unwrap();
        g.backward(l, &ParameterSet::new()).unwrap();
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = logits
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| v.exp() / z - if j == 2 { 1.0 } else { 0.0 })
            .collect();
        for (a, b) in g.grad(x).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
