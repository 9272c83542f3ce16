//! Pel-recursive displacement estimation over a whole frame.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frame::{bilinear_sample, BorderPolicy, Frame};
use super::solver::{build_system, solve_update, MaskSpec, SolverSpec, System};
use crate::error::{Error, Result};
use crate::io::format_f64;

/// Where each pixel's iteration starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Final estimate of the pixel to the left, zero at row starts.
    #[default]
    Causal,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub mask: MaskSpec,
    pub solver: SolverSpec,
    pub max_iterations: usize,
    /// Stop once the update is shorter than this (pixels).
    pub tolerance: f64,
    /// Each displacement component is kept within `[-clamp, clamp]`.
    pub clamp: f64,
    pub init: Init,
    pub border: BorderPolicy,
    /// Process rows on the rayon pool. Rows never read each other's
    /// estimates, so the result is identical to the serial scan.
    pub parallel: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            mask: MaskSpec::causal(),
            solver: SolverSpec::Ols,
            max_iterations: 5,
            tolerance: 0.01,
            clamp: 15.0,
            init: Init::Causal,
            border: BorderPolicy::Clamp,
            parallel: false,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask.len() < 2 {
            return Err(Error::config("mask needs at least 2 points"));
        }
        self.solver.validate()?;
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        if !(self.clamp > 0.0) || !self.clamp.is_finite() {
            return Err(Error::config("clamp must be a positive number of pixels"));
        }
        Ok(())
    }
}

/// Per-pixel displacements, row-major like [`Frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub d: Vec<[f64; 2]>,
    pub iterations: Vec<u32>,
    pub converged: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PixelResult {
    d: [f64; 2],
    iterations: u32,
    converged: bool,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        DisplacementField {
            width,
            height,
            d: vec![[0.0; 2]; n],
            iterations: vec![0; n],
            converged: vec![true; n],
        }
    }

    pub fn uniform(width: usize, height: usize, d: [f64; 2]) -> Self {
        let mut f = DisplacementField::zeros(width, height);
        f.d.fill(d);
        f
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.d[y * self.width + x]
    }

    pub fn converged_fraction(&self) -> f64 {
        self.converged.iter().filter(|c| **c).count() as f64 / self.converged.len() as f64
    }

    /// Component-wise median over pixels at least `margin` away from every border.
    pub fn interior_median(&self, margin: usize) -> Option<[f64; 2]> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let d = self.at(x, y);
                xs.push(d[0]);
                ys.push(d[1]);
            }
        }
        if xs.is_empty() {
            return None;
        }
        Some([median(&mut xs), median(&mut ys)])
    }

    /// Mean Euclidean error against a reference field over the interior.
    pub fn mean_abs_error(&self, truth: &DisplacementField, margin: usize) -> Result<f64> {
        if (self.width, self.height) != (truth.width, truth.height) {
            return Err(Error::dim("fields differ in size"));
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let (a, b) = (self.at(x, y), truth.at(x, y));
                sum += (a[0] - b[0]).hypot(a[1] - b[1]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::config(format!("margin {margin} leaves no interior pixels")));
        }
        Ok(sum / count as f64)
    }

    /// CSV with header `x,y,d_x,d_y,iterations,converged`, raster order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,d_x,d_y,iterations,converged\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                out.push_str(&format!(
                    "{x},{y},{},{},{},{}\n",
                    format_f64(self.d[i][0]),
                    format_f64(self.d[i][1]),
                    self.iterations[i],
                    u8::from(self.converged[i])
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows: Vec<(usize, usize, [f64; 2], u32, bool)> = Vec::new();
        for record in reader.records() {
            let r = record?;
            if r.len() < 4 {
                return Err(Error::Parse(format!("field row has {} columns, need at least 4", r.len())));
            }
            let num = |i: usize| -> Result<f64> {
                r[i].trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("field column {i}: {e}")))
            };
            let idx = |i: usize| -> Result<usize> {
                r[i].trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("field column {i}: {e}")))
            };
            let iterations = if r.len() > 4 { idx(4)? as u32 } else { 0 };
            let converged = r.len() <= 5 || matches!(r[5].trim(), "1" | "true");
            rows.push((idx(0)?, idx(1)?, [num(2)?, num(3)?], iterations, converged));
        }
        let width = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let height = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != width * height {
            return Err(Error::Parse(format!(
                "{} rows do not cover a {width}x{height} grid",
                rows.len()
            )));
        }
        let mut field = DisplacementField::zeros(width, height);
        let mut seen = vec![false; width * height];
        for (x, y, d, it, conv) in rows {
            let i = y * width + x;
            if seen[i] {
                return Err(Error::Parse(format!("pixel ({x}, {y}) listed twice")));
            }
            seen[i] = true;
            field.d[i] = d;
            field.iterations[i] = it;
            field.converged[i] = conv;
        }
        Ok(field)
    }

    pub fn read(path: &Path) -> Result<Self> {
        DisplacementField::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Masked DFD energy `sum z_i^2` with the system it came from.
fn system_at(prev: &Frame, cur: &Frame, x: usize, y: usize, d: [f64; 2], cfg: &FieldConfig) -> Option<(System, f64)> {
    let sys = build_system(prev, cur, x as isize, y as isize, d, &cfg.mask, cfg.border).ok()?;
    let energy = sys.z.iter().map(|z| z * z).sum();
    Some((sys, energy))
}

/// Iterates `d <- d + u` from `start`. A step that raises the masked DFD
/// energy is rejected and ends the iteration, unless it is already below
/// the tolerance.
fn refine_pixel(prev: &Frame, cur: &Frame, x: usize, y: usize, start: [f64; 2], cfg: &FieldConfig) -> PixelResult {
    let mut d = start;
    let mut converged = false;
    let mut iterations = 0;
    let mut current = system_at(prev, cur, x, y, d, cfg);
    while (iterations as usize) < cfg.max_iterations {
        let Some((sys, energy)) = &current else { break };
        iterations += 1;
        if *energy == 0.0 {
            // Exact match; the update is zero even where the system is singular.
            converged = true;
            break;
        }
        let Ok(u) = solve_update(&sys.g, &sys.z, &cfg.solver) else { break };
        let next = [
            (d[0] + u[0]).clamp(-cfg.clamp, cfg.clamp),
            (d[1] + u[1]).clamp(-cfg.clamp, cfg.clamp),
        ];
        let small = u[0].hypot(u[1]) < cfg.tolerance;
        if small {
            d = next;
            converged = true;
            break;
        }
        match system_at(prev, cur, x, y, next, cfg) {
            Some(candidate) if candidate.1 <= *energy => {
                d = next;
                current = Some(candidate);
            }
            _ => break,
        }
    }
    PixelResult {
        d,
        iterations,
        converged,
    }
}

fn estimate_row(prev: &Frame, cur: &Frame, y: usize, cfg: &FieldConfig) -> Vec<PixelResult> {
    let mut predictor = [0.0; 2];
    (0..cur.width())
        .map(|x| {
            let start = match cfg.init {
                Init::Causal => predictor,
                Init::Zero => [0.0; 2],
            };
            let r = refine_pixel(prev, cur, x, y, start, cfg);
            predictor = r.d;
            r
        })
        .collect()
}

/// Raster-scan estimate of the field carrying `prev` onto `cur`, so that
/// `cur(r) ~ prev(r - d(r))`. Pixels whose system is flat or singular keep
/// their starting value and are flagged as not converged.
pub fn estimate_field(prev: &Frame, cur: &Frame, cfg: &FieldConfig) -> Result<DisplacementField> {
    if !prev.same_shape(cur) {
        return Err(Error::dim(format!(
            "frames are {}x{} and {}x{}",
            prev.width(),
            prev.height(),
            cur.width(),
            cur.height()
        )));
    }
    cfg.validate()?;
    let rows: Vec<Vec<PixelResult>> = if cfg.parallel {
        (0..cur.height())
            .into_par_iter()
            .map(|y| estimate_row(prev, cur, y, cfg))
            .collect()
    } else {
        (0..cur.height()).map(|y| estimate_row(prev, cur, y, cfg)).collect()
    };
    let mut field = DisplacementField::zeros(cur.width(), cur.height());
    for (i, r) in rows.into_iter().flatten().enumerate() {
        field.d[i] = r.d;
        field.iterations[i] = r.iterations;
        field.converged[i] = r.converged;
    }
    Ok(field)
}

/// Sums of squared zero-motion and compensated differences over the interior.
fn ssd_pair(prev: &Frame, cur: &Frame, field: &DisplacementField, margin: usize) -> Result<(f64, f64, f64)> {
    let (mut raw, mut comp, mut energy) = (0.0, 0.0, 0.0);
    for y in margin..cur.height().saturating_sub(margin) {
        for x in margin..cur.width().saturating_sub(margin) {
            let c = cur.at(x, y);
            let d = field.at(x, y);
            let p = bilinear_sample(prev, x as f64 - d[0], y as f64 - d[1], BorderPolicy::Clamp)?.value;
            raw += (c - prev.at(x, y)).powi(2);
            comp += (c - p).powi(2);
            energy += c * c;
        }
    }
    Ok((raw, comp, energy))
}

/// Improvement in motion compensation, in dB, over a frame sequence.
/// `fields[k]` carries `frames[k]` onto `frames[k + 1]`.
pub fn imc(frames: &[Frame], fields: &[DisplacementField], margin: usize) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::config("IMC needs at least two frames"));
    }
    if fields.len() != frames.len() - 1 {
        return Err(Error::dim(format!(
            "{} frames need {} fields, got {}",
            frames.len(),
            frames.len() - 1,
            fields.len()
        )));
    }
    let (mut raw, mut comp, mut energy) = (0.0, 0.0, 0.0);
    for (pair, field) in frames.windows(2).zip(fields) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if !prev.same_shape(cur) || (field.width, field.height) != (cur.width(), cur.height()) {
            return Err(Error::dim("frames and fields must share one size"));
        }
        let (r, c, e) = ssd_pair(prev, cur, field, margin)?;
        raw += r;
        comp += c;
        energy += e;
    }
    if energy == 0.0 {
        return Err(Error::InvalidData(format!(
            "margin {margin} leaves no interior pixels or frames are black"
        )));
    }
    if comp < 1e-12 * energy {
        return Err(Error::PerfectRegistration);
    }
    Ok(10.0 * (raw / comp).log10())
}
