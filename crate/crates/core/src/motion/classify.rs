//! Class membership of displacement scores in principal-component space.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A class modelled as a Gaussian in score space. Points within `radius`
/// Mahalanobis units of `mean` may belong to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreClass {
    pub label: String,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub radius: f64,
}

impl ScoreClass {
    /// Sample mean and covariance of `points`.
    pub fn fit(label: &str, points: &[[f64; 2]], radius: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidData("a class needs at least two points".into()));
        }
        let n = points.len() as f64;
        let mean = points.iter().fold([0.0; 2], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        let mut cov = [[0.0; 2]; 2];
        for p in points {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / (n - 1.0);
                }
            }
        }
        Ok(ScoreClass {
            label: label.to_string(),
            mean,
            covariance: cov,
            radius,
        })
    }

    /// Inverse covariance, regularized by `1e-8 trace I` when singular.
    fn precision(&self) -> Result<Matrix2<f64>> {
        let c = &self.covariance;
        let m = Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]);
        if let Some(inv) = m.cholesky().map(|ch| ch.inverse()) {
            return Ok(inv);
        }
        let boost = 1e-8 * m.trace();
        (m + Matrix2::identity() * boost)
            .cholesky()
            .map(|ch| ch.inverse())
            .ok_or(Error::Singularity {
                what: "class covariance",
                condition: f64::INFINITY,
            })
    }

    pub fn mahalanobis(&self, score: [f64; 2]) -> Result<f64> {
        let d = Vector2::new(score[0] - self.mean[0], score[1] - self.mean[1]);
        Ok((d.transpose() * self.precision()? * d)[(0, 0)].max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "classes", rename_all = "snake_case")]
pub enum Membership {
    Class(usize),
    /// Fits no class: an outlier or a new group.
    Outlier,
    /// Fits several classes; all candidates in class order.
    Ambiguous(Vec<usize>),
}

/// A point belongs to a class when it is within the class radius and its
/// residual norm is at most `residual_limit`.
pub fn classify_scores(
    scores: &[[f64; 2]],
    residuals: &[f64],
    classes: &[ScoreClass],
    residual_limit: f64,
) -> Result<Vec<Membership>> {
    if classes.is_empty() {
        return Err(Error::config("at least one class is required"));
    }
    if scores.len() != residuals.len() {
        return Err(Error::dim(format!(
            "{} scores but {} residual norms",
            scores.len(),
            residuals.len()
        )));
    }
    let precisions = classes.iter().map(|c| c.precision()).collect::<Result<Vec<_>>>()?;
    Ok(scores
        .iter()
        .zip(residuals)
        .map(|(s, r)| {
            if *r > residual_limit {
                return Membership::Outlier;
            }
            let hits: Vec<usize> = classes
                .iter()
                .zip(&precisions)
                .enumerate()
                .filter(|(_, (c, p))| {
                    let d = Vector2::new(s[0] - c.mean[0], s[1] - c.mean[1]);
                    (d.transpose() * *p * d)[(0, 0)].max(0.0).sqrt() <= c.radius
                })
                .map(|(i, _)| i)
                .collect();
            match hits.len() {
                0 => Membership::Outlier,
                1 => Membership::Class(hits[0]),
                _ => Membership::Ambiguous(hits),
            }
        })
        .collect())
}
