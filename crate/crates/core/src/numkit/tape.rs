//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Operations are appended to a [`Tape`] as they execute; [`Tape::backward`]
//! walks the tape in reverse and returns a [`Gradients`] table. The op set is
//! closed: affine maps, elementwise arithmetic, SiLU, column concatenation,
//! row scaling and a handful of reductions. That is everything the denoiser
//! and the policy objectives need.

use super::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Silu(Var),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    RowSumSquares(Var),
    WeightedSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn mismatch(&self, op: &str, a: Var, b: Var) -> Error {
        Error::Shape(format!("{op}: incompatible shapes {:?} and {:?}", self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape()))
    }

    /// Leaf that gradients are tracked for (a parameter).
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.without_grad(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.without_grad(), Op::Leaf, false)
    }

    /// `a · w` with `a: r × k`, `w: k × c`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(w);
        if k != k2 {
            return Err(self.mismatch("matmul", a, w));
        }
        let out = tensor::matmul(self.nodes[a.0].value.data(), r, k, self.nodes[w.0].value.data(), c);
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, w), rg))
    }

    /// Adds a `1 × c` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.nodes[bias.0].value.len() != c {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.nodes[bias.0].value.data();
        let mut out = self.nodes[a.0].value.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddBias(a, bias), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(self.mismatch(name, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].value.data().iter().map(|v| v * s).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data).expect("shape preserved"), Op::Scale(a, s), rg)
    }

    /// Multiplies row `i` of `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if factors.len() != r {
            return Err(Error::Shape(format!("scale_rows: {} factors for {r} rows", factors.len())));
        }
        let mut out = self.nodes[a.0].value.data().to_vec();
        for (row, f) in out.chunks_mut(c.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ScaleRows(a, factors), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].value.data().iter().map(|&v| tensor::silu(v)).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data).expect("shape preserved"), Op::Silu(a), rg)
    }

    /// `[a | b]` along columns; both must have the same row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(ra, ca + cb, out)?, Op::ConcatCols(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Squared L2 norm of all entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Per-row squared L2 norm, `r × c → r × 1`.
    pub fn row_sum_squares(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = tensor::row_sum_squares(self.nodes[a.0].value.data(), r, c);
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, 1, out).expect("r values"), Op::RowSumSquares(a), rg)
    }

    /// `Σ weights[i] · a[i]` over all entries, with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if weights.len() != t.len() {
            return Err(Error::Shape(format!("weighted_sum: {} weights for {} values", weights.len(), t.len())));
        }
        let s = t.data().iter().zip(&weights).map(|(v, w)| v * w).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got shape {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, w) => {
                    let (r, k) = self.dims(*a);
                    let c = self.dims(*w).1;
                    if self.rg(*a) {
                        let ga = tensor::matmul_bt(&g, r, c, self.nodes[w.0].value.data(), k);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*w) {
                        let gw = tensor::matmul_at(self.nodes[a.0].value.data(), r, k, &g, c);
                        accumulate(&mut grads, *w, gw);
                    }
                }
                Op::AddBias(a, b) => {
                    let c = self.dims(*a).1;
                    if self.rg(*b) {
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let gb: Vec<f64> = g.iter().zip(self.nodes[b.0].value.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, gb);
                    }
                    if self.rg(*b) {
                        let ga: Vec<f64> = g.iter().zip(self.nodes[a.0].value.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, ga);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect()),
                Op::ScaleRows(a, f) => {
                    let c = self.dims(*a).1.max(1);
                    let mut ga = g;
                    for (row, fi) in ga.chunks_mut(c).zip(f) {
                        row.iter_mut().for_each(|v| *v *= fi);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let ga = g.iter().zip(self.nodes[a.0].value.data()).map(|(gv, &x)| gv * tensor::silu_grad(x)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.dims(*a);
                    let cb = self.dims(*b).1;
                    let w = ca + cb;
                    if self.rg(*a) {
                        let ga = (0..r).flat_map(|i| g[i * w..i * w + ca].iter().copied()).collect();
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = (0..r).flat_map(|i| g[i * w + ca..(i + 1) * w].iter().copied()).collect();
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, vec![g[0] / n.max(1) as f64; n]);
                }
                Op::SumSquares(a) => {
                    let ga = self.nodes[a.0].value.data().iter().map(|x| 2.0 * x * g[0]).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSumSquares(a) => {
                    let c = self.dims(*a).1.max(1);
                    let x = self.nodes[a.0].value.data();
                    let ga = x.iter().enumerate().map(|(i, xv)| 2.0 * xv * g[i / c]).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, w) => {
                    accumulate(&mut grads, *a, w.iter().map(|wi| wi * g[0]).collect());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}
