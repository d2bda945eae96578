use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// Scalars have an empty shape, vectors one dimension and matrices two.
/// Most kernels operate on matrices; `dot` and the elementwise kernels accept
/// any shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_elem(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::from_elem(shape, S::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::from_elem(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equally long rows into a matrix.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::contract(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub(crate) fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(format!("{op} produced NaN or infinity")))
        }
    }

    fn require_matrix(&self, op: &str) -> Result<()> {
        if self.is_matrix() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )))
        }
    }

    fn require_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )))
        }
    }

    /// True when `other` is a `[1, n]` row that broadcasts over `self`'s rows.
    pub(crate) fn broadcasts_row(&self, other: &Self) -> bool {
        self.is_matrix()
            && other.is_matrix()
            && other.shape[0] == 1
            && self.shape[0] != 1
            && other.shape[1] == self.shape[1]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.require_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Elementwise sum; `other` may also be a `[1, n]` row broadcast over rows.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.broadcasts_row(other) {
            let mut out = self.clone();
            let cols = self.cols();
            for row in out.data.chunks_mut(cols) {
                for (o, &b) in row.iter_mut().zip(&other.data) {
                    *o += b;
                }
            }
            return Ok(out);
        }
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.broadcasts_row(other) {
            let mut out = self.clone();
            let cols = self.cols();
            for row in out.data.chunks_mut(cols) {
                for (o, &b) in row.iter_mut().zip(&other.data) {
                    *o -= b;
                }
            }
            return Ok(out);
        }
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dimensions {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.require_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Divides each row by its Euclidean norm. Returns the output and the
    /// per-row norms; a zero row is a domain error.
    pub fn row_normalize(&self) -> Result<(Self, Vec<S>)> {
        self.require_matrix("row_normalize")?;
        let mut out = self.clone();
        let mut norms = Vec::with_capacity(self.rows());
        for (i, row) in out.data.chunks_mut(self.shape[1]).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(norm > S::zero()) {
                return Err(Error::Domain(format!("row {i} has zero norm")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        Ok((out, norms))
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        first.require_matrix("concat_rows")?;
        let cols = first.shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            p.require_matrix("concat_rows")?;
            if p.shape[1] != cols {
                return Err(Error::contract(format!(
                    "concat_rows: column counts {} and {}",
                    cols, p.shape[1]
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, cols, data)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Result<Self> {
        self.require_matrix("softmax")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.shape[1]) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(out)
    }

    /// Row-wise `log(sum(exp(row)))`, stabilized by the row maximum.
    pub fn logsumexp_rows(&self) -> Result<Vec<S>> {
        self.require_matrix("logsumexp")?;
        Ok(self
            .data
            .chunks(self.shape[1])
            .map(|row| {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let total: S = row.iter().map(|&v| (v - max).exp()).sum();
                max + total.ln()
            })
            .collect())
    }
}
