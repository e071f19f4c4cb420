//! Dense row-major `f64` tensors.
//!
//! [`Tensor`] is a plain value type. Gradient tracking lives on the
//! [`Tape`](crate::autodiff::Tape), which records operations over tensors and
//! stores per-leaf gradient buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(shape_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose data length is known to match; panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows. All rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged matrix rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(low..high))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of bounds for axis {i} of size {dim}"
            );
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(shape_err("transpose", &self.shape, &[]));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        let mut out = vec![0.0; self.numel()];
        transpose_batched(&self.data, &mut out, m, n);
        Ok(Self::from_parts(shape, out))
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().expect("row() on scalar");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn transpose_batched(src: &[f64], dst: &mut [f64], m: usize, n: usize) {
    let block = m * n;
    for (s, d) in src.chunks_exact(block).zip(dst.chunks_exact_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

/// `c += a · b` for `a: m×k`, `b: k×n`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, giving `c: k×n`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[2, 3, 2]);
        assert_eq!(tt.at(&[1, 2, 0]), t.at(&[1, 0, 2]));
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn kernels_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        mm_nn(&a, &b, &mut c, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        transpose_batched(&b, &mut bt, 3, 4);
        let mut c2 = vec![0.0; 8];
        mm_nt(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        let mut at = vec![0.0; 6];
        transpose_batched(&a, &mut at, 2, 3);
        let mut c3 = vec![0.0; 8];
        mm_tn(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }
}
