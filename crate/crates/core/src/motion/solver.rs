//! Linearized observation systems `z = G u + n` and their update estimators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::frame::{bilinear_sample, clamp_point, BorderPolicy, Frame};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_2x2;
use crate::pca::SINGULAR_CONDITION;

/// Gradient rows shorter than this carry no information.
pub const FLAT_GRADIENT: f64 = 1e-12;

/// Neighbourhood of pixels whose equations are stacked for one working point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub offsets: Vec<(isize, isize)>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::causal()
    }
}

impl MaskSpec {
    pub fn new(offsets: Vec<(isize, isize)>) -> Result<Self> {
        if offsets.len() < 2 {
            return Err(Error::config(format!(
                "a mask needs at least 2 points, got {}",
                offsets.len()
            )));
        }
        Ok(MaskSpec { offsets })
    }

    /// The working point, its left neighbour and the three pixels above.
    pub fn causal() -> Self {
        MaskSpec {
            offsets: vec![(0, 0), (-1, 0), (-1, -1), (0, -1), (1, -1)],
        }
    }

    /// Full `size x size` square centred on the working point (odd `size`).
    pub fn square(size: usize) -> Result<Self> {
        if size < 2 || size % 2 == 0 {
            return Err(Error::config(format!("square mask size {size} must be odd and >= 3")));
        }
        let h = (size / 2) as isize;
        let offsets = (-h..=h).flat_map(|dy| (-h..=h).map(move |dx| (dx, dy))).collect();
        Ok(MaskSpec { offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Largest offset along either axis.
    pub fn reach(&self) -> usize {
        self.offsets
            .iter()
            .map(|(dx, dy)| dx.unsigned_abs().max(dy.unsigned_abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Stacked equations, one per mask point, in mask order.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    /// `N x 2` spatial gradients of the previous frame at `r_i - d`.
    pub g: DMatrix<f64>,
    /// Negated displaced frame differences, so that `G u ~ z` moves `d` toward the match.
    pub z: Vec<f64>,
}

/// Builds `G` and `z` for the working point `(x, y)` at estimate `d`.
///
/// `I_prev(r - d - u) ~ I_prev(r - d) - grad . u`, so the update solves
/// `grad . u = -dfd(r; d)` at every mask point.
///
/// Under [`BorderPolicy::Clamp`], a mask point outside `cur`, or whose
/// displaced position leaves `prev`, keeps its row but the row is zero, so
/// it adds nothing to the normal equations. Under [`BorderPolicy::Error`]
/// such a point is an error.
pub fn build_system(
    prev: &Frame,
    cur: &Frame,
    x: isize,
    y: isize,
    d: [f64; 2],
    mask: &MaskSpec,
    border: BorderPolicy,
) -> Result<System> {
    let n = mask.len();
    let mut g = DMatrix::zeros(n, 2);
    let mut z = vec![0.0; n];
    let mut informative = false;
    let (wmax, hmax) = ((cur.width() - 1) as f64, (cur.height() - 1) as f64);
    for (i, &(dx, dy)) in mask.offsets.iter().enumerate() {
        let (px, py) = (x + dx, y + dy);
        let (cx, cy) = clamp_point(cur, px, py);
        let (sx, sy) = (px as f64 - d[0], py as f64 - d[1]);
        let usable = (cx, cy) == (px, py) && (0.0..=wmax).contains(&sx) && (0.0..=hmax).contains(&sy);
        if !usable && border == BorderPolicy::Clamp {
            continue;
        }
        let here = cur.pixel(px, py, border)?;
        let s = bilinear_sample(prev, sx, sy, border)?;
        g[(i, 0)] = s.gradient[0];
        g[(i, 1)] = s.gradient[1];
        informative |= s.gradient[0].hypot(s.gradient[1]) >= FLAT_GRADIENT;
        z[i] = s.value - here;
    }
    if !informative {
        return Err(Error::DegenerateSystem);
    }
    Ok(System { g, z })
}

/// Which principal components PCR1 keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// Keep exactly 1 or 2 components.
    Components(usize),
    /// Keep the second component only when `lambda2 / lambda1` exceeds this.
    Ratio(f64),
}

/// Update estimator. `Rls` takes a symmetric PSD 2x2 matrix, `Pcr2` the
/// diagonal of a PSD matrix in the principal-component domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    Ols,
    Rls { lambda: [[f64; 2]; 2] },
    Pcr1 { retention: Retention },
    Pcr2 { xi: [f64; 2] },
}

pub const DEFAULT_LAMBDA: f64 = 100.0;
pub const DEFAULT_RATIO: f64 = 0.01;

impl SolverSpec {
    pub fn rls(lambda: f64) -> Self {
        SolverSpec::Rls {
            lambda: [[lambda, 0.0], [0.0, lambda]],
        }
    }

    pub fn pcr1() -> Self {
        SolverSpec::Pcr1 {
            retention: Retention::Ratio(DEFAULT_RATIO),
        }
    }

    pub fn pcr2(xi: f64) -> Self {
        SolverSpec::Pcr2 { xi: [xi, xi] }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverSpec::Ols => "ols",
            SolverSpec::Rls { .. } => "rls",
            SolverSpec::Pcr1 { .. } => "pcr1",
            SolverSpec::Pcr2 { .. } => "pcr2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverSpec::Ols => Ok(()),
            SolverSpec::Rls { lambda: l } => {
                let finite = l.iter().flatten().all(|v| v.is_finite());
                if !finite || l[0][1] != l[1][0] {
                    return Err(Error::config("RLS regularizer must be a finite symmetric matrix"));
                }
                let (_, lo, _) = sym_eigen_2x2(l[0][0], l[0][1], l[1][1]);
                if lo < 0.0 {
                    return Err(Error::config("RLS regularizer must be positive semi-definite"));
                }
                Ok(())
            }
            SolverSpec::Pcr1 { retention } => match retention {
                Retention::Components(1 | 2) => Ok(()),
                Retention::Components(c) => Err(Error::config(format!(
                    "PCR1 keeps 1 or 2 components, not {c}"
                ))),
                Retention::Ratio(r) if r >= 0.0 && r.is_finite() => Ok(()),
                Retention::Ratio(r) => Err(Error::config(format!("PCR1 ratio {r} must be >= 0"))),
            },
            SolverSpec::Pcr2 { xi } => {
                if xi.iter().all(|v| *v >= 0.0 && v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::config("PCR2 regularizer entries must be >= 0"))
                }
            }
        }
    }
}

/// `G^T G` as `(a, b, c)` = `[[a, b], [b, c]]`, and `G^T z`.
fn normal_equations(g: &DMatrix<f64>, z: &[f64]) -> Result<((f64, f64, f64), [f64; 2])> {
    if g.ncols() != 2 || g.nrows() != z.len() {
        return Err(Error::dim(format!(
            "G is {}x{}, z has {} entries",
            g.nrows(),
            g.ncols(),
            z.len()
        )));
    }
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut r = [0.0; 2];
    for (i, zi) in z.iter().enumerate() {
        let (gx, gy) = (g[(i, 0)], g[(i, 1)]);
        a += gx * gx;
        b += gx * gy;
        c += gy * gy;
        r[0] += gx * zi;
        r[1] += gy * zi;
    }
    Ok(((a, b, c), r))
}

/// Solves `[[a, b], [b, c]] u = r`, optionally refusing ill-conditioned systems.
fn solve_sym2(a: f64, b: f64, c: f64, r: [f64; 2], check_condition: bool, what: &'static str) -> Result<[f64; 2]> {
    let (hi, lo, _) = sym_eigen_2x2(a, b, c);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let det = a * c - b * b;
    if (check_condition && condition > SINGULAR_CONDITION) || !(det > 0.0) {
        return Err(Error::Singularity { what, condition });
    }
    Ok([(c * r[0] - b * r[1]) / det, (a * r[1] - b * r[0]) / det])
}

/// One update `u` for the stacked system.
pub fn solve_update(g: &DMatrix<f64>, z: &[f64], spec: &SolverSpec) -> Result<[f64; 2]> {
    let ((a, b, c), r) = normal_equations(g, z)?;
    match *spec {
        SolverSpec::Ols => solve_sym2(a, b, c, r, true, "OLS normal equations"),
        SolverSpec::Rls { lambda: l } => {
            let regularized = (a + l[0][0], b + l[0][1], c + l[1][1]);
            let zero = l.iter().flatten().all(|v| *v == 0.0);
            solve_sym2(regularized.0, regularized.1, regularized.2, r, zero, "RLS normal equations")
        }
        SolverSpec::Pcr1 { retention } => {
            let (l1, l2, [cs, sn]) = sym_eigen_2x2(a, b, c);
            if !(l1 > 0.0) {
                return Err(Error::Singularity {
                    what: "PCR1 leading component",
                    condition: f64::INFINITY,
                });
            }
            let keep_second = match retention {
                Retention::Components(k) => k >= 2,
                Retention::Ratio(t) => l2 / l1 > t,
            };
            if keep_second && l1 / l2.max(0.0) > SINGULAR_CONDITION {
                return Err(Error::Singularity {
                    what: "PCR1 second component",
                    condition: l1 / l2,
                });
            }
            // loadings p1 = (cs, sn), p2 = (-sn, cs); scores T = G P
            let t1 = (cs * r[0] + sn * r[1]) / l1;
            let mut u = [cs * t1, sn * t1];
            if keep_second {
                let t2 = (-sn * r[0] + cs * r[1]) / l2;
                u[0] -= sn * t2;
                u[1] += cs * t2;
            }
            Ok(u)
        }
        SolverSpec::Pcr2 { xi } => {
            let (l1, l2, [cs, sn]) = sym_eigen_2x2(a, b, c);
            let (d1, d2) = (l1 + xi[0], l2.max(0.0) + xi[1]);
            if !(d2 > 0.0) || d1 / d2 > SINGULAR_CONDITION {
                return Err(Error::Singularity {
                    what: "PCR2 regularized scores",
                    condition: d1 / d2,
                });
            }
            let t1 = (cs * r[0] + sn * r[1]) / d1;
            let t2 = (-sn * r[0] + cs * r[1]) / d2;
            Ok([cs * t1 - sn * t2, sn * t1 + cs * t2])
        }
    }
}
