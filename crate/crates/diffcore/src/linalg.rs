//! Dense inverse via Gauss-Jordan elimination with partial pivoting.

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Relative pivot threshold below which the matrix is treated as singular.
const PIVOT_TOLERANCE: f64 = 1e-13;

/// Shift used by [`regularized_inverse`]: `coeff · trace(w) / d`.
pub const REGULARIZATION_COEFF: f64 = 1e-6;

/// Inverts a square matrix. Fails with a condition estimate when a pivot
/// collapses relative to the largest one seen.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "inverse")?;
    let mut work = a.data().to_vec();
    let mut inv = Tensor::identity(n).into_data();
    let mut max_pivot = 0.0_f64;
    let mut min_pivot = f64::INFINITY;
    let scale = a.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(DiffError::Singular {
            condition: f64::INFINITY,
        });
    }

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                work[i * n + col]
                    .abs()
                    .total_cmp(&work[j * n + col].abs())
            })
            .unwrap_or(col);
        let pivot = work[pivot_row * n + col];
        max_pivot = max_pivot.max(pivot.abs());
        min_pivot = min_pivot.min(pivot.abs());
        if pivot.abs() <= PIVOT_TOLERANCE * scale {
            return Err(DiffError::Singular {
                condition: if min_pivot == 0.0 {
                    f64::INFINITY
                } else {
                    max_pivot / min_pivot
                },
            });
        }
        if pivot_row != col {
            for j in 0..n {
                work.swap(pivot_row * n + j, col * n + j);
                inv.swap(pivot_row * n + j, col * n + j);
            }
        }
        let inv_pivot = 1.0 / pivot;
        for j in 0..n {
            work[col * n + j] *= inv_pivot;
            inv[col * n + j] *= inv_pivot;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = work[i * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[i * n + j] -= factor * work[col * n + j];
                inv[i * n + j] -= factor * inv[col * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Shift `ε = coeff · trace(w) / d` added to the diagonal before inverting.
pub fn regularization_shift(w: &Tensor) -> f64 {
    let n = w.rows();
    let trace: f64 = (0..n).map(|i| w.get2(i, i)).sum();
    REGULARIZATION_COEFF * trace / n as f64
}

/// Inverse of `w + εI` with `ε` from [`regularization_shift`].
pub fn regularized_inverse(w: &Tensor) -> Result<Tensor> {
    let n = square_dim(w, "regularized_inverse")?;
    let eps = regularization_shift(w);
    let mut shifted = w.clone();
    for i in 0..n {
        shifted.data_mut()[i * n + i] += eps;
    }
    inverse(&shifted)
}

/// 1-norm condition number `‖A‖₁·‖A⁻¹‖₁`.
pub fn condition_number(a: &Tensor) -> Result<f64> {
    let inv = inverse(a)?;
    Ok(one_norm(a) * one_norm(&inv))
}

fn one_norm(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.cols());
    (0..c)
        .map(|j| (0..r).map(|i| a.get2(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![a.rows(), a.rows()],
        });
    }
    if a.rows() == 0 {
        return Err(DiffError::Empty { op });
    }
    Ok(a.rows())
}
