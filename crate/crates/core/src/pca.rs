//! Three routes to the principal subspace: eigen-decomposition of the
//! sample covariance, SVD of the scaled data, and zero-noise EM (which also
//! handles missing entries). All of them return a [`SubspaceModel`].

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;

/// Condition number beyond which a `k x k` Gram matrix counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Covariance,
    Svd,
    Em,
    Spca,
}

/// Ordered orthonormal basis of a principal subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceModel {
    pub algorithm: Algorithm,
    /// `p x k`, orthonormal columns, each column sign-normalized.
    #[serde(with = "io::rows")]
    pub basis: DMatrix<f64>,
    /// Variance along each basis column, descending.
    pub eigenvalues: Vec<f64>,
    #[serde(with = "io::vector")]
    pub mean: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// EM only: `||Y - C X||_F` after every E-step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reconstruction_trace: Vec<f64>,
}

impl SubspaceModel {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Coordinates of `y` in the basis after removing the model mean.
    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.dim() {
            return Err(Error::dim(format!(
                "point has {} coordinates, model has {}",
                y.len(),
                self.dim()
            )));
        }
        Ok(self.basis.transpose() * (y - &self.mean))
    }

    /// `k x n` scores of every column of `data` (mean taken from the model).
    pub fn scores(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.nrows() != self.dim() {
            return Err(Error::dim(format!(
                "data has {} rows, model has {}",
                data.nrows(),
                self.dim()
            )));
        }
        let mut centered = data.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(self.basis.transpose() * centered)
    }
}

/// Settings shared by every iterative fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Number of components to extract.
    pub k: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(k: usize) -> Self {
        EmConfig {
            k,
            max_iterations: 1000,
            tolerance: 1e-7,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self, p: usize, n: usize) -> Result<()> {
        if self.k < 1 || self.k > p.min(n) {
            return Err(Error::config(format!(
                "k = {} must lie in 1..={} for a {p}x{n} problem",
                self.k,
                p.min(n)
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be positive"));
        }
        Ok(())
    }
}

fn check_k(k: usize, p: usize) -> Result<()> {
    if k < 1 || k > p {
        return Err(Error::config(format!("k = {k} must lie in 1..={p}")));
    }
    Ok(())
}

/// Leading `k` eigenvectors of the sample covariance (cyclic Jacobi).
pub fn pca_covariance(m: &DataMatrix, k: usize) -> Result<SubspaceModel> {
    check_k(k, m.nrows())?;
    let centered = m.center();
    let cov = centered.sample_covariance()?;
    let eig = linalg::sym_eigen(&cov)?;
    let mut basis = eig.vectors.columns(0, k).into_owned();
    linalg::normalize_signs(&mut basis);
    Ok(SubspaceModel {
        algorithm: Algorithm::Covariance,
        basis,
        eigenvalues: eig.values[..k].to_vec(),
        mean: centered.mean().cloned().unwrap_or_else(|| DVector::zeros(m.nrows())),
        iterations: 0,
        converged: true,
        reconstruction_trace: Vec::new(),
    })
}

/// Leading right singular vectors of `X^T / sqrt(n - 1)`; eigenvalues are the
/// squared singular values.
pub fn pca_svd(m: &DataMatrix, k: usize) -> Result<SubspaceModel> {
    check_k(k, m.nrows())?;
    if !m.is_complete() {
        return Err(Error::MissingData(m.missing_count()));
    }
    let centered = m.center();
    let n = m.ncols() as f64;
    let y = centered.values().transpose() / (n - 1.0).sqrt();
    let (singular, v) = linalg::right_singular(&y)?;
    let mut basis = v.columns(0, k).into_owned();
    linalg::normalize_signs(&mut basis);
    Ok(SubspaceModel {
        algorithm: Algorithm::Svd,
        basis,
        eigenvalues: singular[..k].iter().map(|s| s * s).collect(),
        mean: centered.mean().cloned().unwrap_or_else(|| DVector::zeros(m.nrows())),
        iterations: 0,
        converged: true,
        reconstruction_trace: Vec::new(),
    })
}

/// Zero-noise EM for the principal subspace.
///
/// E-step `X = (C^T C)^-1 C^T Y`, M-step `C = Y X^T (X X^T)^-1`, with each
/// column's missing coordinates re-estimated in the E-step. Only `p x k`,
/// `k x n` and `k x k` work matrices are formed. A fit that exhausts
/// `max_iterations` is returned with `converged = false`.
pub fn pca_em(m: &DataMatrix, cfg: &EmConfig) -> Result<SubspaceModel> {
    let (p, n) = (m.nrows(), m.ncols());
    cfg.validate(p, n)?;
    let centered = m.center();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut attempt = 0;
    loop {
        match em_fit(&centered, cfg, &mut rng) {
            Err(Error::Singularity { .. }) if attempt == 0 => {
                log::warn!("EM start was singular, restarting from a fresh seeded basis");
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn em_fit(centered: &DataMatrix, cfg: &EmConfig, rng: &mut ChaCha8Rng) -> Result<SubspaceModel> {
    let p = centered.nrows();
    let k = cfg.k;
    let mask = centered.mask();
    let mut data: Cow<DMatrix<f64>> = Cow::Borrowed(centered.values());
    let (mut c, _) = linalg::orthonormalize(&linalg::gaussian_matrix(p, k, rng), rng);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let x = match mask {
            Some(mask) => e_step_missing(&c, data.to_mut(), mask)?,
            None => e_step(&c, &data)?,
        };
        trace.push(reconstruction_error(&data, &c, &x));

        let c_next = m_step(&data, &x)?;
        // Only the span is identified, so each new C is replaced by an
        // orthonormal basis of its span. Rank lost in the M-step is made up
        // from the previous basis.
        let mut candidates = DMatrix::zeros(p, 2 * k);
        candidates.columns_mut(0, k).copy_from(&c_next);
        candidates.columns_mut(k, k).copy_from(&c);
        let (q, _) = linalg::gram_schmidt(&candidates, k, rng);
        let change = principal_angle(&c, &q)?;
        c = q;
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }

    if let Some(mask) = mask {
        e_step_missing(&c, data.to_mut(), mask)?;
    }
    let (basis, eigenvalues) = ordered_basis(&c, &data)?;
    Ok(SubspaceModel {
        algorithm: Algorithm::Em,
        basis,
        eigenvalues,
        mean: centered.mean().cloned().unwrap_or_else(|| DVector::zeros(p)),
        iterations,
        converged,
        reconstruction_trace: trace,
    })
}

fn solve_spd(gram: &DMatrix<f64>, rhs: DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let condition = linalg::spd_condition(gram)?;
    if condition > SINGULAR_CONDITION {
        return Err(Error::Singularity { what, condition });
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(Error::Singularity { what, condition })?;
    Ok(chol.solve(&rhs))
}

fn e_step(c: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = c.transpose() * c;
    solve_spd(&gram, c.transpose() * y, "EM E-step (C^T C)")
}

/// Per column: the least-squares pair `(x*, y*)` with `y*` pinned to the
/// observed coordinates. The minimizer fits `x*` to the observed rows alone
/// and then sets the unobserved rows of `y*` to `C x*`, which zeroes their
/// residual. The small fit uses a QR factorization.
fn e_step_missing(
    c: &DMatrix<f64>,
    y: &mut DMatrix<f64>,
    mask: &DMatrix<bool>,
) -> Result<DMatrix<f64>> {
    let gram = c.transpose() * &*c;
    let condition = linalg::spd_condition(&gram)?;
    if condition > SINGULAR_CONDITION {
        return Err(Error::Singularity {
            what: "EM E-step (C^T C)",
            condition,
        });
    }
    let chol = gram.cholesky().ok_or(Error::Singularity {
        what: "EM E-step (C^T C)",
        condition,
    })?;
    let (p, n) = y.shape();
    let k = c.ncols();
    let mut x = DMatrix::zeros(k, n);
    for j in 0..n {
        let observed: Vec<usize> = (0..p).filter(|&i| !mask[(i, j)]).collect();
        let xj = if observed.len() == p {
            chol.solve(&(c.transpose() * y.column(j)))
        } else {
            let c_obs = DMatrix::from_fn(observed.len(), k, |r, col| c[(observed[r], col)]);
            let y_obs = DVector::from_iterator(observed.len(), observed.iter().map(|&i| y[(i, j)]));
            least_squares(c_obs, &y_obs)
        };
        for i in 0..p {
            if mask[(i, j)] {
                y[(i, j)] = c.row(i).transpose().dot(&xj);
            }
        }
        x.set_column(j, &xj);
    }
    Ok(x)
}

fn least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let cols = a.ncols();
    if a.nrows() >= cols {
        let qr = a.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if scale > 0.0 && r.diagonal().iter().all(|d| d.abs() > 1e-12 * scale) {
            let qtb = qr.q().transpose() * b;
            if let Some(sol) = r.solve_upper_triangular(&qtb) {
                return sol;
            }
        }
    }
    // too few observed rows for a unique x*: minimum-norm solution
    a.svd(true, true)
        .solve(b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols))
}

fn m_step(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xxt = x * x.transpose();
    let yxt = y * x.transpose();
    // C (X X^T) = Y X^T; pseudo-inverse when the latent scores lose rank
    let eig = linalg::sym_eigen(&xxt)?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let k = xxt.nrows();
    let mut inv = DMatrix::zeros(k, k);
    for (i, &l) in eig.values.iter().enumerate() {
        if l > 1e-12 * top {
            let v = eig.vectors.column(i);
            inv += (v * v.transpose()) / l;
        }
    }
    Ok(yxt * inv)
}

/// `||Y - C X||_F`, accumulated one column at a time.
fn reconstruction_error(y: &DMatrix<f64>, c: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let mut buf = DVector::zeros(y.nrows());
    let mut total = 0.0;
    for j in 0..y.ncols() {
        buf.copy_from(&y.column(j));
        buf.gemv(-1.0, c, &x.column(j), 1.0);
        total += buf.norm_squared();
    }
    total.sqrt()
}

/// Diagonalizes the covariance of the data projected onto the orthonormal
/// `q`, giving eigenvector order and sign inside the span.
fn ordered_basis(q: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = y.ncols() as f64;
    let z = q.transpose() * y;
    let cov = (&z * z.transpose()) / (n - 1.0);
    let eig = linalg::sym_eigen(&cov)?;
    let mut basis = q * &eig.vectors;
    linalg::normalize_signs(&mut basis);
    Ok((basis, eig.values))
}

/// Largest principal angle between the spans of two orthonormal `p x k`
/// matrices, in `[0, pi/2]`.
///
/// The cosine comes from the smallest singular value of `a^T b` and the sine
/// from the largest singular value of `b - a a^T b`; combining both keeps
/// small and large angles accurate.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "cannot compare spans of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let cross = a.transpose() * b;
    let cos_eig = linalg::sym_eigen(&(cross.transpose() * &cross))?;
    let cos = cos_eig
        .values
        .last()
        .copied()
        .unwrap_or(1.0)
        .clamp(0.0, 1.0)
        .sqrt();
    let residual = b - a * &cross;
    let sin_eig = linalg::sym_eigen(&(residual.transpose() * &residual))?;
    let sin = sin_eig
        .values
        .first()
        .copied()
        .unwrap_or(0.0)
        .clamp(0.0, 1.0)
        .sqrt();
    Ok(sin.atan2(cos).clamp(0.0, std::f64::consts::FRAC_PI_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn data(rows: usize, cols: usize, v: &[f64]) -> DataMatrix {
        DataMatrix::new(DMatrix::from_row_slice(rows, cols, v)).unwrap()
    }

    fn synthetic(p: usize, n: usize, eig: &[f64], sigma: f64, seed: u64) -> (DataMatrix, DMatrix<f64>) {
        generate_synthetic(&SyntheticSpec {
            p,
            n,
            true_rank: eig.len(),
            eigenvalues: eig.to_vec(),
            noise_sigma: sigma,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn angles_of_simple_spans() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let diag = DMatrix::from_column_slice(2, 1, &[0.5_f64.sqrt(), 0.5_f64.sqrt()]);
        assert_eq!(principal_angle(&e1, &e1).unwrap(), 0.0);
        assert!((principal_angle(&e1, &e2).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((principal_angle(&e1, &diag).unwrap() - FRAC_PI_4).abs() < 1e-15);
        assert!(principal_angle(&e1, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn diagonal_covariance() {
        // rows with variances 3 and 1, uncorrelated
        let s3 = 3.0_f64.sqrt();
        let d = data(2, 4, &[s3, -s3, s3, -s3, 1.0, 1.0, -1.0, -1.0]);
        let model = pca_covariance(&d, 2).unwrap();
        assert!((model.eigenvalues[0] - 4.0).abs() < 1e-12);
        assert!((model.eigenvalues[1] - 4.0 / 3.0).abs() < 1e-12);
        assert!((model.basis.clone() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn correlated_pair_has_analytic_eigensystem() {
        // covariance [[2,1],[1,2]]: samples +-a u1 +-b u2 with u1 = (1,1)/sqrt2,
        // u2 = (1,-1)/sqrt2 and 4a^2/3 = 3, 4b^2/3 = 1
        let (a, b) = (1.5_f64, 0.75_f64.sqrt());
        let s = 0.5_f64.sqrt();
        let mut v = vec![0.0; 8];
        for (j, (e1, e2)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().enumerate() {
            v[j] = e1 * a * s + e2 * b * s;
            v[4 + j] = e1 * a * s - e2 * b * s;
        }
        let d = data(2, 4, &v);
        let cov = d.center().sample_covariance().unwrap();
        assert!((cov - DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).norm() < 1e-12);
        let model = pca_covariance(&d, 2).unwrap();
        assert!((model.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((model.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((model.basis[(0, 0)] - s).abs() < 1e-12);
        assert!((model.basis[(1, 0)] - s).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_covariance_completes_basis() {
        let (d, _) = synthetic(6, 3, &[4.0, 1.0], 0.5, 2);
        let model = pca_covariance(&d, 5).unwrap();
        let gram = model.basis.transpose() * &model.basis;
        assert!((gram - DMatrix::identity(5, 5)).norm() < 1e-8);
        assert!(model.eigenvalues[2..].iter().all(|l| l.abs() < 1e-10));
    }

    #[test]
    fn svd_route_on_rank_one_data() {
        // X = [[1,-1],[1,-1]] has singular values (2, 0)
        let d = data(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        let model = pca_svd(&d, 2).unwrap();
        assert!((model.eigenvalues[0] - 4.0 / 1.0).abs() < 1e-12);
        assert!(model.eigenvalues[1].abs() < 1e-12);
    }

    #[test]
    fn single_row_matrix() {
        let d = data(1, 4, &[1.0, 2.0, 3.0, 6.0]);
        let svd = pca_svd(&d, 1).unwrap();
        let cov = pca_covariance(&d, 1).unwrap();
        assert_eq!(svd.basis[(0, 0)], 1.0);
        assert_eq!(cov.basis[(0, 0)], 1.0);
        // mean 3, squared deviations 4+1+0+9 = 14, over 3
        assert!((svd.eigenvalues[0] - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn em_fixed_point_on_noiseless_subspace() {
        let (d, _) = synthetic(12, 40, &[5.0, 2.0], 0.0, 3);
        let model = pca_em(&d, &EmConfig::new(2)).unwrap();
        assert!(model.converged);
        let c = d.center();
        let scores = model.basis.transpose() * c.values();
        let err = (c.values() - &model.basis * scores).norm();
        assert!(err < 1e-8 * c.values().norm(), "residual {err}");
    }

    #[test]
    fn em_matches_covariance_on_planted_data() {
        let (d, _) = synthetic(10, 500, &[4.0, 1.0], 0.3, 4);
        let em = pca_em(&d, &EmConfig::new(2)).unwrap();
        let cov = pca_covariance(&d, 2).unwrap();
        assert!(principal_angle(&em.basis, &cov.basis).unwrap() < 1e-4);
        for (a, b) in em.eigenvalues.iter().zip(&cov.eigenvalues) {
            assert!((a - b).abs() < 1e-6 * b);
        }
    }

    #[test]
    fn em_reconstruction_error_never_increases() {
        let (d, _) = synthetic(15, 60, &[3.0, 2.5, 1.0], 0.4, 5);
        for masked in [false, true] {
            let d = if masked { d.with_random_mask(0.1, 8).unwrap() } else { d.clone() };
            let model = pca_em(&d, &EmConfig::new(3)).unwrap();
            for w in model.reconstruction_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "trace rose: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn em_with_missing_entries_stays_near_planted_basis() {
        let (d, planted) = synthetic(10, 500, &[4.0, 1.0], 0.3, 6);
        let masked = d.with_random_mask(0.1, 16).unwrap();
        let model = pca_em(&masked, &EmConfig::new(2)).unwrap();
        assert!(model.converged);
        assert!(principal_angle(&model.basis, &planted).unwrap() < 0.1);
    }

    #[test]
    fn em_completes_rank_deficient_span() {
        let (d, _) = synthetic(8, 30, &[4.0, 1.0], 0.0, 7);
        let model = pca_em(&d, &EmConfig::new(4)).unwrap();
        let gram = model.basis.transpose() * &model.basis;
        assert!((gram - DMatrix::identity(4, 4)).norm() < 1e-8);
        assert!(model.eigenvalues[2..].iter().all(|l| l.abs() < 1e-10));
        assert!(model.eigenvalues[1] > 0.1);
    }

    #[test]
    fn em_reports_non_convergence() {
        let (d, _) = synthetic(10, 100, &[1.05, 1.0], 0.2, 8);
        let cfg = EmConfig::new(1).with_max_iterations(2).with_tolerance(1e-12);
        let model = pca_em(&d, &cfg).unwrap();
        assert!(!model.converged);
        assert_eq!(model.iterations, 2);
    }

    #[test]
    fn config_validation() {
        let (d, _) = synthetic(4, 10, &[1.0], 0.1, 9);
        assert!(pca_em(&d, &EmConfig::new(0)).is_err());
        assert!(pca_em(&d, &EmConfig::new(5)).is_err());
        assert!(pca_em(&d, &EmConfig::new(1).with_tolerance(0.0)).is_err());
        assert!(pca_covariance(&d, 5).is_err());
    }

    #[test]
    fn covariance_and_svd_refuse_missing_entries() {
        let (d, _) = synthetic(4, 10, &[1.0], 0.1, 9);
        let masked = d.with_random_mask(0.2, 1).unwrap();
        assert!(matches!(pca_covariance(&masked, 1), Err(Error::MissingData(_))));
        assert!(matches!(pca_svd(&masked, 1), Err(Error::MissingData(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let (d, _) = synthetic(5, 20, &[2.0], 0.1, 10);
        let model = pca_em(&d, &EmConfig::new(1)).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        assert!(text.contains("\"algorithm\":\"em\""));
        let back: SubspaceModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, model);
    }
}
