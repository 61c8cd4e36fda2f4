//! Dense inverses. `gauss_jordan_inverse` is the exact full-rank route;
//! `pinv_iterative` is the cubic Newton-family iteration used inside the
//! attention approximation, where it must stay differentiable.

use super::{kernels, Tape, Tensor, Var};
use crate::error::{EdsError, Result};

/// Exact inverse via Gauss-Jordan elimination with partial pivoting.
/// Accumulates in f64; errors on non-square or numerically singular input.
pub fn gauss_jordan_inverse(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(EdsError::shape(format!(
            "inverse needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    let mut m = vec![0.0f64; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            m[i * 2 * n + j] = a.at(i, j) as f64;
        }
        m[i * 2 * n + n + i] = 1.0;
    }

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                m[r1 * 2 * n + col]
                    .abs()
                    .total_cmp(&m[r2 * 2 * n + col].abs())
            })
            .unwrap();
        let pivot = m[pivot_row * 2 * n + col];
        if pivot.abs() < 1e-12 {
            return Err(EdsError::numerical(format!(
                "matrix is singular at column {col}"
            )));
        }
        if pivot_row != col {
            for j in 0..2 * n {
                m.swap(col * 2 * n + j, pivot_row * 2 * n + j);
            }
        }
        let inv_p = 1.0 / pivot;
        for j in 0..2 * n {
            m[col * 2 * n + j] *= inv_p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * 2 * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                m[r * 2 * n + j] -= f * m[col * 2 * n + j];
            }
        }
    }

    let data: Vec<f32> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| m[i * 2 * n + n + j] as f32)
        .collect();
    Tensor::matrix(n, n, data)
}

/// Iterative Moore-Penrose approximation: Z0 = A^T / (|A|_1 * |A|_inf),
/// then `iters` rounds of Z <- Z(13I - AZ(15I - AZ(7I - AZ)))/4.
/// The iteration count is fixed; each round is ordinary recorded ops, so
/// gradients flow through the unrolled product chain.
pub fn pinv_iterative(a: &Tensor, iters: usize) -> Result<Tensor> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(EdsError::shape(format!(
            "pinv needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    a.check_finite("pinv input")?;
    // The zero matrix is its own pseudo-inverse; the scaling init would 0/0.
    if a.data().iter().all(|&v| v == 0.0) {
        return Ok(Tensor::zeros(a.shape().to_vec()));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let z = tape_pinv(&mut tape, av, iters);
    Ok(tape.value(z).clone())
}

/// Tape-recorded body of `pinv_iterative`, shared by the tracked attention
/// path and the plain wrapper above.
pub(crate) fn tape_pinv(tape: &mut Tape, a: Var, iters: usize) -> Var {
    let n = tape.value(a).rows();
    let abs_a = tape.abs(a);
    let rs = tape.row_sums(abs_a);
    let norm_inf = tape.max_all(rs);
    let cs = tape.col_sums(abs_a);
    let norm_one = tape.max_all(cs);
    let denom = tape.mul_elem(norm_inf, norm_one);
    let at = tape.transpose(a);
    let mut z = tape.div_by_scalar(at, denom);

    let c7 = tape.constant(kernels::scale(&Tensor::eye(n), 7.0));
    let c13 = tape.constant(kernels::scale(&Tensor::eye(n), 13.0));
    let c15 = tape.constant(kernels::scale(&Tensor::eye(n), 15.0));
    for _ in 0..iters {
        let az = tape.matmul(a, z);
        let t1 = tape.sub(c7, az);
        let p1 = tape.matmul(az, t1);
        let t2 = tape.sub(c15, p1);
        let p2 = tape.matmul(az, t2);
        let t3 = tape.sub(c13, p2);
        let zt = tape.matmul(z, t3);
        z = tape.scale(zt, 0.25);
    }
    z
}
