use crate::{Error, Result};

/// Dense row-major 64-bit tensor with an optional gradient accumulator.
///
/// Everything in this crate is at most two-dimensional; a 1-D tensor of
/// length `n` is treated as a `1 × n` row and a scalar as `1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value], grad: None }
    }

    /// `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value; panics on non-scalar tensors.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient accumulator, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn without_grad(&self) -> Self {
        Self { shape: self.shape.clone(), data: self.data.clone(), grad: None }
    }

    /// Exact bitwise equality of shape and values (treats NaN payloads as values).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// Kernels shared by the tape and by plain value code. Each output row depends
// only on the matching input row and the per-element accumulation order is
// fixed, so results are bitwise independent of batch size.

pub(crate) fn matmul(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * cols..(k + 1) * cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `g · bᵀ` where `g` is `rows × cols` and `b` is `inner × cols`.
pub(crate) fn matmul_bt(g: &[f64], rows: usize, cols: usize, b: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * inner];
    for i in 0..rows {
        let grow = &g[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let brow = &b[k * cols..(k + 1) * cols];
            out[i * inner + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `rows × inner` and `g` is `rows × cols`.
pub(crate) fn matmul_at(a: &[f64], rows: usize, inner: usize, g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner * cols];
    for i in 0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        let grow = &g[i * cols..(i + 1) * cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * cols..(k + 1) * cols];
            for (o, &gij) in orow.iter_mut().zip(grow) {
                *o += aik * gij;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Per-row sum of squared entries.
pub(crate) fn row_sum_squares(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).map(|i| a[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert_eq!(Tensor::scalar(1.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn grad_is_shape_congruent() {
        let mut t = Tensor::zeros(vec![3, 2]);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 6);
    }

    #[test]
    fn matmul_rows_are_batch_independent() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let full = matmul(&a, 3, 4, &b, 2);
        let single = matmul(&a[4..8], 1, 4, &b, 2);
        assert_eq!(full[2..4], single[..]);
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let ab = matmul(&a, 2, 3, &b, 2);
        assert_eq!(ab, vec![-1.0, 7.5, -1.0, 18.0]);
        // ab · bᵀ, shape 2x3
        let g = matmul_bt(&ab, 2, 2, &b, 3);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], -1.0 + 7.5 * 0.5);
        let at = matmul_at(&a, 2, 3, &ab, 2);
        assert_eq!(at[0], -1.0 + -4.0);
    }
}
