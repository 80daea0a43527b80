//! Flat row-major f64 tensors.
//!
//! Shapes are arbitrary-rank, but the arithmetic helpers target the ranks
//! the model actually uses: scalars are shape `[1]`, vectors `[n]`, and
//! matrices `[r, c]`. All data lives in one contiguous `Vec<f64>`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Column vector `[n, 1]` from a slice.
    pub fn column(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len(), 1], data: values.to_vec() }
    }

    /// Row matrix `[1, n]` from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor { shape: vec![1, values.len()], data: values.to_vec() }
    }

    /// Rank-1 vector `[n]` from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a matrix (or length of a vector).
    pub fn rows(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            [n] => Ok(*n),
            _ => Err(Error::Contract(format!("rows() on shape {:?}", self.shape))),
        }
    }

    /// Columns of a matrix.
    pub fn cols(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            _ => Err(Error::Contract(format!("cols() on shape {:?}", self.shape))),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Row `i` of a matrix as a slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ([r, k1], [k2, c]) = (dims2(self)?, dims2(other)?);
        if k1 != k2 {
            return Err(Error::Contract(format!(
                "matmul: inner dimensions {k1} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let lhs_row = &self.data[i * k1..(i + 1) * k1];
            let out_row = &mut out[i * c..(i + 1) * c];
            for (p, &l) in lhs_row.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs_row = &other.data[p * c..(p + 1) * c];
                for (o, &v) in out_row.iter_mut().zip(rhs_row) {
                    *o += l * v;
                }
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        let [r, c] = dims2(self)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Select rows of a rank-2 tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let [r, c] = dims2(self)?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Contract(format!(
                    "row index {i} out of range for {r} rows"
                )));
            }
            out.extend_from_slice(self.row_slice(i));
        }
        Tensor::new(vec![rows.len(), c], out)
    }

    /// Select columns of a rank-2 tensor, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let [r, c] = dims2(self)?;
        let mut out = Vec::with_capacity(rows_times(cols.len(), r));
        for i in 0..r {
            let row = self.row_slice(i);
            for &j in cols {
                if j >= c {
                    return Err(Error::Contract(format!(
                        "column index {j} out of range for {c} columns"
                    )));
                }
                out.push(row[j]);
            }
        }
        Tensor::new(vec![r, cols.len()], out)
    }
}

fn rows_times(a: usize, b: usize) -> usize {
    a.saturating_mul(b)
}

/// Both dimensions of a rank-2 tensor.
pub fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [r, c] => Ok([*r, *c]),
        other => Err(Error::Contract(format!("expected rank-2 tensor, got shape {other:?}"))),
    }
}
