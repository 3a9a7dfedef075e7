//! Small dense symmetric linear algebra: Cholesky factorization, SPD solves,
//! log-determinants and a cyclic Jacobi eigensolver.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Lower-triangular Cholesky factor `L` with `a = L Lᵀ`.
pub fn cholesky<T: Scalar>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("cholesky of non-square {}x{}", n, a.ncols())));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("pivot {j} is {diag}")));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// `2 Σ log L_ii`, the log-determinant of the factored matrix.
pub fn log_det_from_cholesky<T: Scalar>(l: ArrayView2<'_, T>) -> T {
    l.diag().iter().map(|d| d.ln()).sum::<T>() * lit(2.0)
}

fn forward_substitute<T: Scalar>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = l.nrows();
    let mut y = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

fn back_substitute_transposed<T: Scalar>(l: ArrayView2<'_, T>, y: ArrayView1<'_, T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = Array1::<T>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `L Lᵀ x = b`.
pub fn cholesky_solve_vec<T: Scalar>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let y = forward_substitute(l, b);
    back_substitute_transposed(l, y.view())
}

/// Solves `L Lᵀ X = B` column by column.
pub fn cholesky_solve<T: Scalar>(l: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut x = Array2::<T>::zeros(b.raw_dim());
    for (j, col) in b.axis_iter(Axis(1)).enumerate() {
        x.column_mut(j).assign(&cholesky_solve_vec(l, col));
    }
    x
}

/// `‖L⁻¹ b‖²`, i.e. `bᵀ A⁻¹ b` for `A = L Lᵀ`.
pub fn inverse_quadratic_form<T: Scalar>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> T {
    let y = forward_substitute(l, b);
    y.dot(&y)
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse<T: Scalar>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let l = cholesky(a)?;
    let inv = cholesky_solve(l.view(), Array2::<T>::eye(a.nrows()).view());
    Ok(symmetrize(inv.view()))
}

pub fn symmetrize<T: Scalar>(a: ArrayView2<'_, T>) -> Array2<T> {
    let half: T = lit(0.5);
    (&a + &a.t()) * half
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn max_asymmetry<T: Scalar>(a: ArrayView2<'_, T>) -> T {
    let mut worst = T::zero();
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen<T: Scalar>(a: ArrayView2<'_, T>) -> Result<(Array1<T>, Array2<T>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("eigen of non-square {}x{}", n, a.ncols())));
    }
    let mut m = symmetrize(a);
    let mut vecs = Array2::<T>::eye(n);
    let scale = m.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
    let tol = T::epsilon() * scale.max(T::min_positive_value());

    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (lit::<T>(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = vecs[[k, p]];
                    let vkq = vecs[[k, q]];
                    vecs[[k, p]] = c * vkp - s * vkq;
                    vecs[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vectors = vecs.select(Axis(1), &order);
    Ok((values, vectors))
}
