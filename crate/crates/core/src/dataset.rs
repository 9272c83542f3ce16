//! Observation matrices, centering, missing-entry bookkeeping and seeded
//! synthetic generators.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Grid};
use crate::linalg;

/// A `p x n` observation matrix: rows are measurement types, columns are
/// samples. Storage is column-major, so each sample is contiguous.
///
/// Entries flagged in the mask are unobserved; their stored values carry no
/// meaning and are never read by the fitting routines.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    mask: Option<DMatrix<bool>>,
    mean: Option<DVector<f64>>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        Self::build(values, None)
    }

    /// `mask[(i, j)] == true` marks entry `(i, j)` as missing. An all-false
    /// mask is dropped.
    pub fn with_mask(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if mask.shape() != values.shape() {
            return Err(Error::dim(format!(
                "mask is {:?} but values are {:?}",
                mask.shape(),
                values.shape()
            )));
        }
        let mask = mask.iter().any(|&m| m).then_some(mask);
        Self::build(values, mask)
    }

    fn build(values: DMatrix<f64>, mask: Option<DMatrix<bool>>) -> Result<Self> {
        let (p, n) = values.shape();
        if p < 1 || n < 2 {
            return Err(Error::dim(format!(
                "need at least 1 row and 2 samples, got {p}x{n}"
            )));
        }
        for j in 0..n {
            let mut observed = 0;
            for i in 0..p {
                if mask.as_ref().is_some_and(|m| m[(i, j)]) {
                    continue;
                }
                observed += 1;
                if !values[(i, j)].is_finite() {
                    return Err(Error::InvalidData(format!(
                        "non-finite value at ({i}, {j})"
                    )));
                }
            }
            if observed == 0 {
                return Err(Error::InvalidData(format!(
                    "sample {j} has no observed entries"
                )));
            }
        }
        Ok(DataMatrix {
            values,
            mask,
            mean: None,
        })
    }

    pub fn from_grid(grid: &Grid) -> Result<Self> {
        let (values, mask) = grid.to_matrix();
        match mask {
            Some(mask) => Self::with_mask(values, mask),
            None => Self::new(values),
        }
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_matrix(&self.values, self.mask.as_ref())
    }

    /// Loads `.emss` files as the binary container, anything else as CSV.
    pub fn read(path: &Path) -> Result<Self> {
        let grid = if path.extension().is_some_and(|e| e == "emss") {
            io::read_emss(path)?
        } else {
            io::read_csv_grid(path)?
        };
        Self::from_grid(&grid)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "emss") {
            io::write_emss(path, &self.to_grid())
        } else {
            io::write_csv_grid(path, &self.to_grid())
        }
    }

    /// Content hash over the binary encoding (values and mask).
    pub fn fingerprint(&self) -> String {
        io::sha256_hex(&io::encode_emss(&self.to_grid()))
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> Option<&DMatrix<bool>> {
        self.mask.as_ref()
    }

    /// Row means removed by [`DataMatrix::center`], if it has been applied.
    pub fn mean(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref()
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[(i, j)])
    }

    pub fn missing_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&x| x).count())
    }

    pub fn is_complete(&self) -> bool {
        self.mask.is_none()
    }

    /// Mean of the observed entries of each row (0 for a row with none).
    pub fn observed_row_means(&self) -> DVector<f64> {
        let (p, n) = self.values.shape();
        DVector::from_fn(p, |i, _| {
            let (sum, count) = (0..n)
                .filter(|&j| !self.is_missing(i, j))
                .fold((0.0, 0usize), |(s, c), j| (s + self.values[(i, j)], c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
    }

    /// Subtracts the observed-entry mean of each row. Missing entries are left
    /// as they are. The accumulated mean is cached, so centering twice
    /// reports the original mean.
    pub fn center(&self) -> DataMatrix {
        let shift = self.observed_row_means();
        let (p, n) = self.values.shape();
        let mut values = self.values.clone();
        for j in 0..n {
            for i in 0..p {
                if !self.is_missing(i, j) {
                    values[(i, j)] -= shift[i];
                }
            }
        }
        let mean = match &self.mean {
            Some(prev) => prev + &shift,
            None => shift,
        };
        DataMatrix {
            values,
            mask: self.mask.clone(),
            mean: Some(mean),
        }
    }

    /// `values * values^T / (n - 1)`. Expects centered, complete data.
    pub fn sample_covariance(&self) -> Result<DMatrix<f64>> {
        if !self.is_complete() {
            return Err(Error::MissingData(self.missing_count()));
        }
        let n = self.ncols() as f64;
        let mut c = &self.values * self.values.transpose();
        c /= n - 1.0;
        // exact symmetry, the product is only symmetric up to rounding
        let c = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
            if i >= j {
                c[(i, j)]
            } else {
                c[(j, i)]
            }
        });
        Ok(c)
    }

    /// Baseline completion: every missing entry replaced by the mean of the
    /// observed entries in its row. The result carries no mask.
    pub fn impute_mean(&self) -> DataMatrix {
        let means = self.observed_row_means();
        let mut values = self.values.clone();
        if let Some(mask) = &self.mask {
            for j in 0..mask.ncols() {
                for i in 0..mask.nrows() {
                    if mask[(i, j)] {
                        values[(i, j)] = means[i];
                    }
                }
            }
        }
        DataMatrix {
            values,
            mask: None,
            mean: self.mean.clone(),
        }
    }

    /// Hides a random fraction of entries, keeping at least one observed
    /// entry per sample. Deterministic in `seed`.
    pub fn with_random_mask(&self, fraction: f64, seed: u64) -> Result<DataMatrix> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "missing fraction {fraction} outside [0, 1)"
            )));
        }
        let (p, n) = self.values.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = DMatrix::from_fn(p, n, |i, j| {
            self.is_missing(i, j) || rng.random::<f64>() < fraction
        });
        for j in 0..n {
            if (0..p).all(|i| mask[(i, j)]) {
                let keep = rng.random_range(0..p);
                mask[(keep, j)] = false;
            }
        }
        let mut out = DataMatrix::with_mask(self.values.clone(), mask)?;
        out.mean = self.mean.clone();
        Ok(out)
    }
}

/// Parameters of the planted low-rank Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub p: usize,
    pub n: usize,
    pub true_rank: usize,
    /// Variances along the planted directions, one per rank.
    pub eigenvalues: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.true_rank > self.p {
            return Err(Error::dim(format!(
                "planted rank {} exceeds dimension {}",
                self.true_rank, self.p
            )));
        }
        if self.p < 1 || self.n < 2 {
            return Err(Error::dim(format!(
                "need p >= 1 and n >= 2, got p={} n={}",
                self.p, self.n
            )));
        }
        if self.eigenvalues.len() != self.true_rank {
            return Err(Error::config(format!(
                "{} eigenvalues given for rank {}",
                self.eigenvalues.len(),
                self.true_rank
            )));
        }
        if self.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::config("planted eigenvalues must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Draws `y = B diag(sqrt(eigenvalues)) x + sigma v` column by column, with
/// `B` a random orthonormal `p x k` basis. Returns the data and `B`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DataMatrix, DMatrix<f64>)> {
    spec.validate()?;
    let (p, n, k) = (spec.p, spec.n, spec.true_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (basis, _) = linalg::orthonormalize(&linalg::gaussian_matrix(p, k, &mut rng), &mut rng);
    let latent = linalg::gaussian_matrix(k, n, &mut rng);
    let noise = linalg::gaussian_matrix(p, n, &mut rng);
    let scales = DVector::from_iterator(k, spec.eigenvalues.iter().map(|l| l.sqrt()));
    let loadings = &basis * DMatrix::from_diagonal(&scales);
    let values = loadings * latent + noise * spec.noise_sigma;
    Ok((DataMatrix::new(values)?, basis))
}
