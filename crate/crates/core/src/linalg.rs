//! Small dense kernels shared by the subspace routes: a cyclic Jacobi
//! eigensolver, a one-sided Jacobi SVD, Gram-Schmidt with basis completion
//! and the sign convention applied to every reported basis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Sweep cap for both Jacobi variants. Well-scaled inputs need fewer than 15.
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Only the lower triangle is trusted; the input is symmetrized first.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::dim(format!(
            "eigensolver needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut m = DMatrix::from_fn(n, n, |i, j| if i >= j { a[(i, j)] } else { a[(j, i)] });
    let mut v = DMatrix::<f64>::identity(n, n);
    let frob = m.norm();
    let mut sweeps = 0;

    if n > 1 && frob > 0.0 {
        loop {
            let mut off = 0.0;
            for q in 1..n {
                for p in 0..q {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off.sqrt() <= f64::EPSILON * frob {
                break;
            }
            if sweeps == MAX_JACOBI_SWEEPS {
                return Err(Error::Convergence {
                    what: "cyclic Jacobi eigensolver",
                    iterations: sweeps,
                });
            }
            sweeps += 1;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = m[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    rotate_cols(&mut m, p, q, c, s);
                    rotate_rows(&mut m, p, q, c, s);
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    rotate_cols(&mut v, p, q, c, s);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

fn rotate_cols(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.nrows() {
        let mp = m[(k, p)];
        let mq = m[(k, q)];
        m[(k, p)] = c * mp - s * mq;
        m[(k, q)] = s * mp + c * mq;
    }
}

fn rotate_rows(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.ncols() {
        let mp = m[(p, k)];
        let mq = m[(q, k)];
        m[(p, k)] = c * mp - s * mq;
        m[(q, k)] = s * mp + c * mq;
    }
}

/// Right singular system of `y` by one-sided (Hestenes) Jacobi rotations.
///
/// Returns singular values in descending order and the matrix whose columns
/// are the matching right singular vectors (`y.ncols()` square).
pub fn right_singular(y: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let cols = y.ncols();
    let mut w = y.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    // columns this small are numerically zero and only churn rotations
    let negligible = f64::EPSILON * f64::EPSILON * y.norm_squared();
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let (alpha, beta, gamma) = {
                    let ci = w.column(i);
                    let cj = w.column(j);
                    (ci.norm_squared(), cj.norm_squared(), ci.dot(&cj))
                };
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_cols(&mut w, i, j, c, s);
                rotate_cols(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(Error::Convergence {
                what: "one-sided Jacobi SVD",
                iterations: sweeps,
            });
        }
    }
    let norms: Vec<f64> = (0..cols).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| norms[i]).collect();
    let vectors = DMatrix::from_fn(cols, cols, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite matrix.
/// Infinite when the smallest eigenvalue is not positive.
pub fn spd_condition(a: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eigen(a)?;
    let hi = eig.values.first().copied().unwrap_or(0.0);
    let lo = eig.values.last().copied().unwrap_or(0.0);
    Ok(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

/// Modified Gram-Schmidt (two passes) returning an orthonormal basis with the
/// column count of `m`. Columns that are numerically dependent on earlier
/// ones are replaced by random directions orthogonal to everything kept so
/// far. The second value counts those replacements.
pub fn orthonormalize<R: Rng + ?Sized>(m: &DMatrix<f64>, rng: &mut R) -> (DMatrix<f64>, usize) {
    gram_schmidt(m, m.ncols(), rng)
}

/// Walks the columns of `candidates` in order, keeping each one that is
/// independent of those already kept, until `want` columns are collected.
/// Any shortfall is filled with random orthogonal directions; the second
/// value is the size of that shortfall.
pub fn gram_schmidt<R: Rng + ?Sized>(
    candidates: &DMatrix<f64>,
    want: usize,
    rng: &mut R,
) -> (DMatrix<f64>, usize) {
    let rows = candidates.nrows();
    let scale = (0..candidates.ncols())
        .map(|j| candidates.column(j).norm())
        .fold(0.0_f64, f64::max);
    let mut q = DMatrix::<f64>::zeros(rows, want);
    let mut kept = 0;
    for j in 0..candidates.ncols() {
        if kept == want {
            break;
        }
        let mut v: DVector<f64> = candidates.column(j).into_owned();
        project_out(&mut v, &q, kept);
        let norm = v.norm();
        if scale > 0.0 && norm > 1e-12 * scale {
            q.set_column(kept, &(v / norm));
            kept += 1;
        }
    }
    let shortfall = want - kept;
    while kept < want {
        let mut v = DVector::from_fn(rows, |_, _| rng.sample(StandardNormal));
        project_out(&mut v, &q, kept);
        let norm = v.norm();
        if norm > 1e-8 {
            q.set_column(kept, &(v / norm));
            kept += 1;
        }
    }
    (q, shortfall)
}

fn project_out(v: &mut DVector<f64>, q: &DMatrix<f64>, upto: usize) {
    for _ in 0..2 {
        for i in 0..upto {
            let qi = q.column(i);
            let coeff = qi.dot(v);
            v.axpy(-coeff, &qi, 1.0);
        }
    }
}

/// Flips each column so its entry of largest magnitude is positive.
/// Magnitudes equal to within 1e-12 relative count as ties; the lowest row wins.
pub fn normalize_signs(basis: &mut DMatrix<f64>) {
    for j in 0..basis.ncols() {
        let mut col = basis.column_mut(j);
        let peak = col.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        if peak == 0.0 {
            continue;
        }
        let lead = col
            .iter()
            .position(|x| x.abs() >= peak * (1.0 - 1e-12))
            .unwrap_or(0);
        if col[lead] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Draws a `rows x cols` matrix of independent standard normals.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Filled column by column so the draw order matches the storage order.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Closed-form eigen-decomposition of the symmetric 2x2 matrix
/// `[[a, b], [b, c]]`: `(larger, smaller, unit eigenvector of larger)`.
/// The second eigenvector is the first rotated by +90 degrees.
pub fn sym_eigen_2x2(a: f64, b: f64, c: f64) -> (f64, f64, [f64; 2]) {
    let mean = 0.5 * (a + c);
    let radius = (0.5 * (a - c)).hypot(b);
    let hi = mean + radius;
    let det = a * c - b * b;
    let lo = if hi != 0.0 { det / hi } else { mean - radius };
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    (hi, lo, [theta.cos(), theta.sin()])
}
