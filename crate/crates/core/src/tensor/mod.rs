//! Dense row-major tensors and a define-by-run reverse-mode differentiation
//! core.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Graph`]: every
//! operation appends a node holding its output value and the data its backward
//! rule needs, and [`Graph::backward`] walks the nodes in reverse insertion
//! order. A new graph is built for every forward pass.
//!
//! Shapes follow a `[batch, points, channels]` convention; the "point axis" is
//! always the second-to-last axis and the "channel axis" the last one.

mod gemm;
pub mod gradcheck;
mod graph;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};

pub(crate) use gemm::gemm;

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds an `rows × cols` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(k: usize) -> Self {
        let mut t = Self::zeros(&[k, k]);
        for i in 0..k {
            t.data[i * k + i] = 1.0;
        }
        t
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

    /// Extent of the last axis (1 for scalars).
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.channels();
        &self.data[i * k..(i + 1) * k]
    }

    /// Splits a tensor along its channel axis at `at`. Inverse of channel concat.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let k = self.channels();
        if at > k {
            return Err(Error::Dimension(format!(
                "cannot split {k} channels at {at}"
            )));
        }
        let rows = self.numel() / k.max(1);
        let mut left = Vec::with_capacity(rows * at);
        let mut right = Vec::with_capacity(rows * (k - at));
        for r in 0..rows {
            left.extend_from_slice(&self.data[r * k..r * k + at]);
            right.extend_from_slice(&self.data[r * k + at..(r + 1) * k]);
        }
        let mut ls = self.shape.clone();
        let mut rs = self.shape.clone();
        *ls.last_mut().unwrap() = at;
        *rs.last_mut().unwrap() = k - at;
        Ok((Self::new(ls, left)?, Self::new(rs, right)?))
    }

    /// Reorders the rows (point axis) of a rank-2 tensor: `out[i] = self[perm[i]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let k = self.channels();
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(&self.data[p * k..(p + 1) * k]);
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn split_then_rejoin_is_bit_exact() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let (a, b) = t.split_channels(1).unwrap();
        assert_eq!(a.shape(), &[2, 1]);
        assert_eq!(b.data(), &[2.0, 3.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let va = g.constant(a);
        let vb = g.constant(b);
        let joined = g.concat(&[va, vb]).unwrap();
        assert_eq!(g.value(joined), &t);
    }
}
