//! Sensible PCA: the linear-Gaussian model `y ~ N(mean, C C^T + eps I)` with
//! a finite isotropic noise level, fitted by EM. Every inverse of the model
//! covariance goes through the matrix inversion lemma, so nothing `p x p` is
//! ever formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::pca::{Algorithm, EmConfig, SubspaceModel, SINGULAR_CONDITION};

const LN_2PI: f64 = 1.8378770664093453;

/// Noise levels below this fraction of the total data variance are a collapse.
pub const COLLAPSE_FRACTION: f64 = 1e-12;

/// `(C C^T + eps I)^-1` held in factored form:
/// `I / eps - C (I + C^T C / eps)^-1 C^T / eps^2`.
#[derive(Debug, Clone)]
pub struct WoodburyInverse {
    c: DMatrix<f64>,
    eps: f64,
    inner: Cholesky<f64, Dyn>,
}

/// Builds the factored inverse of `C C^T + eps I`.
pub fn woodbury_inverse(c: &DMatrix<f64>, eps: f64) -> Result<WoodburyInverse> {
    WoodburyInverse::new(c, eps)
}

impl WoodburyInverse {
    pub fn new(c: &DMatrix<f64>, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::config(format!("noise level {eps} must be positive")));
        }
        let k = c.ncols();
        let gram = c.transpose() * c;
        let inner = DMatrix::<f64>::identity(k, k) + &gram / eps;
        // inner >= I, so its condition number is 1 + lambda_max(C^T C) / eps
        let condition = 1.0 + linalg::sym_eigen(&gram)?.values.first().copied().unwrap_or(0.0) / eps;
        if condition > SINGULAR_CONDITION {
            return Err(Error::Singularity {
                what: "matrix inversion lemma (I + C^T C / eps)",
                condition,
            });
        }
        let inner = inner.cholesky().ok_or(Error::Singularity {
            what: "matrix inversion lemma (I + C^T C / eps)",
            condition,
        })?;
        Ok(WoodburyInverse {
            c: c.clone(),
            eps,
            inner,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// `C^T (C C^T + eps I)^-1 v = (I + C^T C / eps)^-1 C^T v / eps`.
    fn latent_mean(&self, v: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(&(self.c.transpose() * v)) / self.eps
    }

    /// `(C C^T + eps I)^-1 v = (v - C mu) / eps` in `O(pk + k^3)`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mu = self.latent_mean(v);
        (v - &self.c * mu) / self.eps
    }

    /// `log det(C C^T + eps I) = p log eps + log det(I + C^T C / eps)`.
    pub fn log_det(&self) -> f64 {
        let inner: f64 = self.inner.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        self.dim() as f64 * self.eps.ln() + inner
    }

    /// `v^T (C C^T + eps I)^-1 v = ||v - C mu||^2 / eps + ||mu||^2`; both terms
    /// are non-negative, so nothing cancels as `eps` shrinks.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        let mu = self.latent_mean(v);
        (v - &self.c * &mu).norm_squared() / self.eps + mu.norm_squared()
    }

    /// For the columns `y_j` of `y`: returns `C^T (C C^T + eps I)^-1 Y`
    /// (`k x n`) and `sum_j y_j^T (C C^T + eps I)^-1 y_j`.
    pub fn latent_means(&self, y: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let means = self.inner.solve(&(self.c.transpose() * y)) / self.eps;
        let quad = residual_energy(y, &self.c, &means) / self.eps + means.norm_squared();
        (means, quad)
    }

    /// Posterior covariance of the latent state, `I - C^T (C C^T + eps I)^-1 C`,
    /// which equals `(I + C^T C / eps)^-1`.
    pub fn posterior_covariance(&self) -> DMatrix<f64> {
        self.inner.inverse()
    }

    /// Dense `p x p` inverse. Intended for checks on small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mut out = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut e = DVector::zeros(p);
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
        }
        out
    }
}

/// A fitted sensible-PCA model. `subspace.eigenvalues` are the eigenvalues
/// of `C C^T` (signal variance beyond the noise floor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcaModel {
    pub subspace: SubspaceModel,
    pub noise_level: f64,
    /// Total training log-likelihood before each M-step and at the final parameters.
    pub log_likelihood_trace: Vec<f64>,
}

impl SpcaModel {
    /// `C = basis diag(sqrt(eigenvalues))`; any rotation of it gives the same density.
    pub fn loadings(&self) -> DMatrix<f64> {
        let scales = DVector::from_iterator(
            self.subspace.rank(),
            self.subspace.eigenvalues.iter().map(|l| l.max(0.0).sqrt()),
        );
        &self.subspace.basis * DMatrix::from_diagonal(&scales)
    }

    pub fn covariance_inverse(&self) -> Result<WoodburyInverse> {
        WoodburyInverse::new(&self.loadings(), self.noise_level)
    }
}

/// EM for sensible PCA on complete data.
///
/// E-step: `beta = C^T (C C^T + eps I)^-1`, `mu = beta Y`,
/// `Sigma = n (I - beta C) + mu mu^T`.
/// M-step: `C = Y mu^T Sigma^-1`, `eps = tr(Y Y^T - C mu Y^T) / (n p)`,
/// where the trace only needs per-coordinate sums.
/// Stops when the relative change of the log-likelihood, or of the model
/// covariance, drops below `cfg.tolerance`.
pub fn spca_em(m: &DataMatrix, cfg: &EmConfig) -> Result<SpcaModel> {
    let (p, n) = (m.nrows(), m.ncols());
    cfg.validate(p, n)?;
    if !m.is_complete() {
        return Err(Error::MissingData(m.missing_count()));
    }
    if cfg.k >= p {
        return Err(Error::config(format!(
            "sensible PCA needs k < p, got k = {} and p = {p}",
            cfg.k
        )));
    }
    let k = cfg.k;
    let centered = m.center();
    let y = centered.values();
    let nf = n as f64;
    let energy = y.norm_squared();
    let total_variance = energy / nf;
    let collapse_threshold = COLLAPSE_FRACTION * total_variance;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (q, _) = linalg::orthonormalize(&linalg::gaussian_matrix(p, k, &mut rng), &mut rng);
    let proj = q.transpose() * y;
    let scales = DVector::from_fn(k, |i, _| (proj.row(i).norm_squared() / nf).sqrt());
    let mut c = &q * DMatrix::from_diagonal(&scales);
    let mut eps = ((energy - proj.norm_squared()) / (nf * (p - k) as f64)).max(collapse_threshold * 1e6);

    let log_likelihood = |w: &WoodburyInverse, quad: f64| -> f64 {
        -0.5 * (nf * p as f64 * LN_2PI + nf * w.log_det() + quad)
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut pending_final = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let w = WoodburyInverse::new(&c, eps)?;
        let (mu, quad) = w.latent_means(y);
        let ll = log_likelihood(&w, quad);
        let stalled = trace
            .last()
            .is_some_and(|prev| (ll - prev).abs() <= cfg.tolerance * prev.abs());
        trace.push(ll);
        pending_final = false;
        if stalled {
            converged = true;
            break;
        }

        let posterior = w.posterior_covariance();
        let sigma = &posterior * nf + &mu * mu.transpose();
        let y_mu = y * mu.transpose();
        let sigma_chol = sigma.clone().cholesky().ok_or(Error::Singularity {
            what: "sensible PCA M-step (Sigma_x)",
            condition: f64::INFINITY,
        })?;
        let c_next = sigma_chol.solve(&y_mu.transpose()).transpose();
        // tr(YY^T - C mu Y^T) rewritten as a sum of non-negative terms
        let spread = (&posterior * (c_next.transpose() * &c_next)).trace() * nf;
        let eps_next = (residual_energy(y, &c_next, &mu) + spread) / (nf * p as f64);
        if !(eps_next >= collapse_threshold) {
            return Err(Error::Collapse {
                noise_level: eps_next,
                threshold: collapse_threshold,
            });
        }

        let change = covariance_change(&c, eps, &c_next, eps_next, p);
        c = c_next;
        eps = eps_next;
        pending_final = true;
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    if pending_final {
        let w = WoodburyInverse::new(&c, eps)?;
        let (_, quad) = w.latent_means(y);
        trace.push(log_likelihood(&w, quad));
    }

    let (q, _) = linalg::orthonormalize(&c, &mut rng);
    let qc = q.transpose() * &c;
    let eig = linalg::sym_eigen(&(&qc * qc.transpose()))?;
    let mut basis = q * eig.vectors;
    linalg::normalize_signs(&mut basis);
    Ok(SpcaModel {
        subspace: SubspaceModel {
            algorithm: Algorithm::Spca,
            basis,
            eigenvalues: eig.values.iter().map(|l| l.max(0.0)).collect(),
            mean: centered.mean().cloned().unwrap_or_else(|| DVector::zeros(p)),
            iterations,
            converged,
            reconstruction_trace: Vec::new(),
        },
        noise_level: eps,
        log_likelihood_trace: trace,
    })
}

/// `||Y - C mu||_F^2`, one column at a time.
fn residual_energy(y: &DMatrix<f64>, c: &DMatrix<f64>, mu: &DMatrix<f64>) -> f64 {
    let mut buf = DVector::zeros(y.nrows());
    let mut total = 0.0;
    for j in 0..y.ncols() {
        buf.copy_from(&y.column(j));
        buf.gemv(-1.0, c, &mu.column(j), 1.0);
        total += buf.norm_squared();
    }
    total
}

/// Relative Frobenius change of `C C^T + eps I`, computed from `k x k` products.
fn covariance_change(c0: &DMatrix<f64>, e0: f64, c1: &DMatrix<f64>, e1: f64, p: usize) -> f64 {
    let g0 = c0.transpose() * c0;
    let g1 = c1.transpose() * c1;
    let cross = c0.transpose() * c1;
    let diff_sq = (g0.norm_squared() + g1.norm_squared() - 2.0 * cross.norm_squared()).max(0.0);
    let root_p = (p as f64).sqrt();
    (diff_sq.sqrt() + root_p * (e1 - e0).abs()) / (g0.norm() + root_p * e0)
}

/// Gaussian log-density of `y` under the fitted model.
pub fn spca_log_likelihood(model: &SpcaModel, y: &DVector<f64>) -> Result<f64> {
    let p = model.subspace.dim();
    if y.len() != p {
        return Err(Error::dim(format!(
            "point has {} coordinates, model has {p}",
            y.len()
        )));
    }
    let w = model.covariance_inverse()?;
    let d = y - &model.subspace.mean;
    Ok(-0.5 * (p as f64 * LN_2PI + w.log_det() + w.quadratic_form(&d)))
}
