//! Small dense symmetric-positive-definite routines.
//!
//! These back both the tape's `chol_logdet` / `chol_solve` operations and
//! the value-level low-rank Gaussian math. Matrices here are tiny (the
//! covariance core is rank-by-rank), so a plain O(n^3) Cholesky is the right
//! tool.

use crate::error::{Error, Result};
use crate::gradcore::tensor::{dims2, Tensor};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let [n, m] = dims2(a)?;
    if n != m {
        return Err(Error::Contract(format!("cholesky of non-square {n}x{m} matrix")));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get2(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numerical(format!(
                        "cholesky pivot {sum:.3e} at row {i}; matrix not positive definite"
                    )));
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Log-determinant of the matrix whose Cholesky factor is `l`.
pub fn logdet_from_factor(l: &Tensor) -> Result<f64> {
    let [n, _] = dims2(l)?;
    let mut acc = 0.0;
    for i in 0..n {
        acc += l.get2(i, i).ln();
    }
    Ok(2.0 * acc)
}

/// Solve `A X = B` given the lower Cholesky factor `l` of `A`.
/// `B` is `[n, m]`; the solve runs column by column.
pub fn solve_from_factor(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, _] = dims2(l)?;
    let [bn, m] = dims2(b)?;
    if bn != n {
        return Err(Error::Contract(format!(
            "solve: factor is {n}x{n} but right-hand side has {bn} rows"
        )));
    }
    let mut x = b.data().to_vec();
    // Forward substitution L y = b, then backward L^T x = y, per column.
    for col in 0..m {
        for i in 0..n {
            let mut sum = x[i * m + col];
            for k in 0..i {
                sum -= l.get2(i, k) * x[k * m + col];
            }
            x[i * m + col] = sum / l.get2(i, i);
        }
        for i in (0..n).rev() {
            let mut sum = x[i * m + col];
            for k in (i + 1)..n {
                sum -= l.get2(k, i) * x[k * m + col];
            }
            x[i * m + col] = sum / l.get2(i, i);
        }
    }
    Tensor::new(vec![n, m], x)
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn inverse_from_factor(l: &Tensor) -> Result<Tensor> {
    let [n, _] = dims2(l)?;
    solve_from_factor(l, &Tensor::eye(n))
}
