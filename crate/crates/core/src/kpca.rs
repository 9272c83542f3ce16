//! Constrained EM eigen-extraction for positive semi-definite matrices, and
//! kernel PCA on top of it.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::pca::EmConfig;

/// Triangular pivots below this fraction of the matrix scale are singular.
pub const PIVOT_FLOOR: f64 = 1e-14;
/// Negative diagonal mass allowed before a matrix counts as indefinite.
pub const PSD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    /// `(a . b + offset)^degree`
    Polynomial { degree: u32, offset: f64 },
    /// `exp(-gamma ||a - b||^2)`
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(Error::config("polynomial degree must be at least 1"));
                }
                if !offset.is_finite() {
                    return Err(Error::config("polynomial offset must be finite"));
                }
                Ok(())
            }
            KernelSpec::Rbf { gamma } => {
                if !(gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::config(format!("rbf gamma {gamma} must be positive")));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Polynomial { degree, offset } => (dot(a, b) + offset).powi(degree as i32),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Median of the pairwise squared distances, turned into `gamma = 1 / median`.
/// A starting point only; nothing calls it implicitly.
pub fn median_gamma(m: &DataMatrix) -> Result<f64> {
    let y = complete(m)?;
    let n = y.ncols();
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for i in 0..j {
            d2.push((y.column(i) - y.column(j)).norm_squared());
        }
    }
    d2.sort_by(f64::total_cmp);
    let median = d2[d2.len() / 2];
    if !(median > 0.0) {
        return Err(Error::InvalidData("all samples coincide".into()));
    }
    Ok(1.0 / median)
}

fn complete(m: &DataMatrix) -> Result<&DMatrix<f64>> {
    if !m.is_complete() {
        return Err(Error::MissingData(m.missing_count()));
    }
    Ok(m.values())
}

/// `K_ij = k(y_i, y_j)` over the columns of `m`. Columns are filled in parallel;
/// each entry is computed by exactly one task, so the result does not depend
/// on the thread count.
pub fn kernel_matrix(m: &DataMatrix, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let y = complete(m)?;
    let n = y.ncols();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let yj = y.column(j);
            (0..n)
                .map(|i| spec.eval(y.column(i).as_slice(), yj.as_slice()))
                .collect()
        })
        .collect();
    Ok(DMatrix::from_iterator(n, n, columns.into_iter().flatten()))
}

/// `k(y_i, y)` for every training column `y_i`.
pub fn kernel_vector(training: &DMatrix<f64>, spec: &KernelSpec, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(training.ncols(), |i, _| {
        spec.eval(training.column(i).as_slice(), y.as_slice())
    })
}

/// Leading eigenpairs of a PSD matrix. Columns of `vectors` have unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub vectors: DMatrix<f64>,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_psd_input(s: &DMatrix<f64>, q: usize, cfg: &EmConfig) -> Result<()> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::dim(format!("matrix is {}x{}, expected square", n, s.ncols())));
    }
    if q < 1 || q > n {
        return Err(Error::config(format!("q = {q} must lie in 1..={n}")));
    }
    EmConfig { k: q, ..cfg.clone() }.validate(n, n)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("matrix has non-finite entries".into()));
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(Error::InvalidData(format!(
            "matrix is not symmetric (max |S - S^T| = {asym:.3e})"
        )));
    }
    Ok(())
}

fn initial_basis(n: usize, q: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    linalg::orthonormalize(&linalg::gaussian_matrix(n, q, &mut rng), &mut rng).0
}

/// Solves `T x = b` for lower-triangular `T` by forward substitution,
/// refusing pivots below `PIVOT_FLOOR` times `scale`.
fn forward_solve(t: &DMatrix<f64>, b: &DMatrix<f64>, scale: f64, what: &'static str) -> Result<DMatrix<f64>> {
    let pivot_min = t.diagonal().iter().fold(f64::INFINITY, |a, &d| a.min(d.abs()));
    if !(pivot_min >= PIVOT_FLOOR * scale) {
        return Err(Error::Singularity {
            what,
            condition: scale / pivot_min,
        });
    }
    t.solve_lower_triangular(b).ok_or(Error::Singularity {
        what,
        condition: f64::INFINITY,
    })
}

fn normalize_columns(w: &mut DMatrix<f64>) {
    for mut c in w.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
}

/// Largest `1 - |cos|` between matching unit columns.
fn column_drift(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .zip(b.column_iter())
        .map(|(x, y)| 1.0 - x.dot(&y).abs().min(1.0))
        .fold(0.0, f64::max)
}

/// Constrained EM:
/// `Z = L(W^T W)^-1 W^T`, then `W = S Z^T U(Z S Z^T)^-1`,
/// where `L` keeps the lower triangle (with diagonal) and `U` the upper one.
/// The triangular constraint pins each column to an individual eigenvector,
/// in descending order. Columns are rescaled to unit norm every iteration,
/// which leaves their directions untouched. Eigenvalues are `diag(W^T S W)`.
pub fn mcem_eigs(s: &DMatrix<f64>, q: usize, cfg: &EmConfig) -> Result<EigenSystem> {
    check_psd_input(s, q, cfg)?;
    let mut w = initial_basis(s.nrows(), q, cfg.seed);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let w_scale = w.norm();
        let gram = (w.transpose() * &w).lower_triangle();
        let z = forward_solve(&gram, &w.transpose(), w_scale * w_scale, "constrained E-step L(W^T W)")?;
        let szt = s * z.transpose();
        let inner = (&z * &szt).upper_triangle();
        let inner_scale = inner.norm();
        // W U = S Z^T  <=>  U^T W^T = Z S
        let mut next = forward_solve(
            &inner.transpose(),
            &szt.transpose(),
            inner_scale,
            "constrained M-step U(Z S Z^T)",
        )?
        .transpose();
        normalize_columns(&mut next);
        let drift = column_drift(&w, &next);
        w = next;
        if drift < cfg.tolerance {
            converged = true;
            break;
        }
    }
    linalg::normalize_signs(&mut w);
    let values = (w.transpose() * s * &w).diagonal().iter().copied().collect();
    Ok(EigenSystem {
        vectors: w,
        values,
        iterations,
        converged,
    })
}

/// The unconstrained EM pair `Z = (W^T W)^-1 W^T`, `W = S Z^T (Z S Z^T)^-1`.
/// Converges to the right span but to an arbitrary basis of it; the
/// returned `W` is left exactly as the iteration produced it.
pub fn em_eigs_unconstrained(s: &DMatrix<f64>, q: usize, cfg: &EmConfig) -> Result<EigenSystem> {
    check_psd_input(s, q, cfg)?;
    let mut w = initial_basis(s.nrows(), q, cfg.seed);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let z = spd_solve(&(w.transpose() * &w), &w.transpose(), "unconstrained E-step W^T W")?;
        let szt = s * z.transpose();
        let next = spd_solve(&(&z * &szt), &szt.transpose(), "unconstrained M-step Z S Z^T")?.transpose();
        let angle = crate::pca::principal_angle(&orth(&w), &orth(&next))?;
        w = next;
        if angle < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let mut unit = w.clone();
    normalize_columns(&mut unit);
    let values = (unit.transpose() * s * &unit).diagonal().iter().copied().collect();
    Ok(EigenSystem {
        vectors: w,
        values,
        iterations,
        converged,
    })
}

fn orth(w: &DMatrix<f64>) -> DMatrix<f64> {
    w.clone().qr().q()
}

fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let chol = a.clone().cholesky().ok_or(Error::Singularity {
        what,
        condition: f64::INFINITY,
    })?;
    Ok(chol.solve(b))
}

/// Relative Frobenius residual of the zero-noise fixed-point equation
/// `W = S W (W^T W)^-1 ((W^T W)^-1 W^T S W (W^T W)^-1)^-1`.
pub fn fixed_point_residual(s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    let q = w.ncols();
    let inv_gram = spd_solve(&(w.transpose() * w), &DMatrix::identity(q, q), "fixed point W^T W")?;
    let sw = s * w;
    let middle = &inv_gram * w.transpose() * &sw * &inv_gram;
    let rhs = sw * inv_gram * spd_solve(&middle, &DMatrix::identity(q, q), "fixed point middle")?;
    Ok((&rhs - w).norm() / w.norm())
}

/// Pivoted incomplete Cholesky factor `S ~ L L^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdFactor {
    #[serde(with = "io::rows")]
    pub l: DMatrix<f64>,
    pub rank: usize,
    /// Pivot indices in the order they were chosen.
    pub pivot_order: Vec<usize>,
    /// Trace of `S - L L^T` when the factorization stopped.
    pub residual_trace: f64,
    /// Residual trace before the first pivot and after each one.
    pub residual_history: Vec<f64>,
}

/// Greedy pivoted outer-product Cholesky. Picks the largest remaining
/// diagonal (lowest index on ties) and stops once the remaining diagonal sum
/// is at most `tol * trace(S)` or no positive pivot is left.
pub fn incomplete_cholesky(s: &DMatrix<f64>, tol: f64) -> Result<PsdFactor> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::dim(format!("matrix is {}x{}, expected square", n, s.ncols())));
    }
    if !(tol >= 0.0) {
        return Err(Error::config("tolerance must be non-negative"));
    }
    let trace = s.trace();
    let floor = -PSD_FLOOR * trace.abs();
    let mut diag: Vec<f64> = s.diagonal().iter().copied().collect();
    if let Some((index, &pivot)) = diag.iter().enumerate().find(|(_, d)| **d < floor) {
        return Err(Error::NotPsd { index, pivot });
    }
    let mut used = vec![false; n];
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut pivot_order = Vec::new();
    let remaining = |diag: &[f64], used: &[bool]| -> f64 {
        diag.iter().zip(used).filter(|(_, u)| !**u).map(|(d, _)| d.max(0.0)).sum()
    };
    let mut residual = remaining(&diag, &used);
    let mut history = vec![residual];
    let zero_pivot = f64::EPSILON * trace.abs() * n as f64;
    while pivot_order.len() < n && residual > tol * trace {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in diag.iter().enumerate() {
            if !used[i] && best.is_none_or(|(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        let (i, d) = best.expect("an unused index remains");
        if d <= zero_pivot {
            break;
        }
        let root = d.sqrt();
        let mut col = s.column(i).into_owned();
        for prev in &columns {
            col.axpy(-prev[i], prev, 1.0);
        }
        col /= root;
        for (j, u) in used.iter().enumerate() {
            if *u {
                col[j] = 0.0;
            }
        }
        col[i] = root;
        used[i] = true;
        for j in 0..n {
            if !used[j] {
                diag[j] -= col[j] * col[j];
                if diag[j] < floor {
                    return Err(Error::NotPsd { index: j, pivot: diag[j] });
                }
            }
        }
        diag[i] = 0.0;
        columns.push(col);
        pivot_order.push(i);
        residual = remaining(&diag, &used);
        history.push(residual);
    }
    let rank = columns.len();
    let l = if rank == 0 {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&columns)
    };
    Ok(PsdFactor {
        l,
        rank,
        pivot_order,
        residual_trace: residual,
        residual_history: history,
    })
}

/// Feature-space centering statistics of a training kernel matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    #[serde(with = "io::vector")]
    pub column_means: DVector<f64>,
    pub grand_mean: f64,
}

impl Centering {
    fn of(k: &DMatrix<f64>) -> Self {
        let n = k.ncols() as f64;
        let column_means = DVector::from_fn(k.ncols(), |j, _| k.column(j).sum() / n);
        let grand_mean = column_means.sum() / n;
        Centering {
            column_means,
            grand_mean,
        }
    }

    /// `K - 1K/N - K1/N + 1K1/N^2`
    fn apply_matrix(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let m = &self.column_means;
        DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| {
            k[(i, j)] - m[i] - m[j] + self.grand_mean
        })
    }

    fn apply_vector(&self, ky: &DVector<f64>) -> DVector<f64> {
        let mean = ky.mean();
        DVector::from_fn(ky.len(), |i, _| {
            ky[i] - self.column_means[i] - mean + self.grand_mean
        })
    }
}

/// Kernel PCA fit. `dual_basis` holds unit eigenvectors of `K`; dividing
/// column `i` by `normalizers[i] = sqrt(w_i^T K w_i)` gives coefficients of a
/// unit-norm feature-space axis.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    pub spec: KernelSpec,
    pub training: DataMatrix,
    pub dual_basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub normalizers: Vec<f64>,
    pub centering: Option<Centering>,
    pub iterations: usize,
    pub converged: bool,
}

/// Serialized form of a [`KernelModel`]; the training matrix is referenced by
/// its fingerprint and supplied again when loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModelFile {
    pub spec: KernelSpec,
    pub eigenvalues: Vec<f64>,
    pub normalizers: Vec<f64>,
    #[serde(with = "io::rows")]
    pub dual_basis: DMatrix<f64>,
    pub data_fingerprint: String,
    pub centering: Option<Centering>,
    pub iterations: usize,
    pub converged: bool,
}

impl KernelModel {
    pub fn to_file(&self) -> KernelModelFile {
        KernelModelFile {
            spec: self.spec,
            eigenvalues: self.eigenvalues.clone(),
            normalizers: self.normalizers.clone(),
            dual_basis: self.dual_basis.clone(),
            data_fingerprint: self.training.fingerprint(),
            centering: self.centering.clone(),
            iterations: self.iterations,
            converged: self.converged,
        }
    }

    pub fn from_file(file: KernelModelFile, training: DataMatrix) -> Result<Self> {
        let fingerprint = training.fingerprint();
        if fingerprint != file.data_fingerprint {
            return Err(Error::InvalidData(format!(
                "training data fingerprint {fingerprint} does not match the model's {}",
                file.data_fingerprint
            )));
        }
        if file.dual_basis.nrows() != training.ncols() {
            return Err(Error::dim("dual basis rows must match the training sample count"));
        }
        Ok(KernelModel {
            spec: file.spec,
            training,
            dual_basis: file.dual_basis,
            eigenvalues: file.eigenvalues,
            normalizers: file.normalizers,
            centering: file.centering,
            iterations: file.iterations,
            converged: file.converged,
        })
    }

    pub fn components(&self) -> usize {
        self.dual_basis.ncols()
    }

    /// Dual coefficients scaled so feature-space axes have unit norm.
    pub fn scaled_basis(&self) -> DMatrix<f64> {
        let mut w = self.dual_basis.clone();
        for (mut c, &s) in w.column_iter_mut().zip(&self.normalizers) {
            if s > 0.0 {
                c /= s;
            } else {
                c.fill(0.0);
            }
        }
        w
    }
}

/// Builds `K` (optionally centered in feature space) and extracts its
/// leading `q` eigenvectors with [`mcem_eigs`].
pub fn kpca_fit(
    m: &DataMatrix,
    spec: &KernelSpec,
    q: usize,
    cfg: &EmConfig,
    center: bool,
) -> Result<KernelModel> {
    let raw = kernel_matrix(m, spec)?;
    let (k, centering) = if center {
        let c = Centering::of(&raw);
        (c.apply_matrix(&raw), Some(c))
    } else {
        (raw, None)
    };
    let eig = mcem_eigs(&k, q, cfg)?;
    let normalizers = eig
        .vectors
        .column_iter()
        .map(|w| w.dot(&(&k * w)).max(0.0).sqrt())
        .collect();
    Ok(KernelModel {
        spec: *spec,
        training: m.clone(),
        dual_basis: eig.vectors,
        eigenvalues: eig.values,
        normalizers,
        centering,
        iterations: eig.iterations,
        converged: eig.converged,
    })
}

/// Coordinates of a new point on the fitted nonlinear axes.
pub fn kpca_project(model: &KernelModel, y: &DVector<f64>) -> Result<DVector<f64>> {
    let p = model.training.nrows();
    if y.len() != p {
        return Err(Error::dim(format!("point has {} coordinates, model has {p}", y.len())));
    }
    let mut ky = kernel_vector(model.training.values(), &model.spec, y);
    if let Some(c) = &model.centering {
        ky = c.apply_vector(&ky);
    }
    Ok(model.scaled_basis().transpose() * ky)
}

/// `q x N` scores of the training points themselves.
pub fn training_scores(model: &KernelModel) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(&model.training, &model.spec)?;
    if let Some(c) = &model.centering {
        k = c.apply_matrix(&k);
    }
    Ok(model.scaled_basis().transpose() * k)
}
