//! Grayscale frames and bilinear lookups.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Grid};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    /// Row-major: `data[y * width + x]`.
    data: Vec<f64>,
}

/// What happens when a lookup leaves the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderPolicy {
    /// Snap the position to the nearest point of the frame.
    #[default]
    Clamp,
    Error,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::dim(format!(
                "frames must be at least 2x2, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "{} intensities for a {width}x{height} frame",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("frame has non-finite intensities".into()));
        }
        Ok(Frame { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Frame::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup for signed coordinates under a border policy.
    pub fn pixel(&self, x: isize, y: isize, border: BorderPolicy) -> Result<f64> {
        let (w, h) = (self.width as isize, self.height as isize);
        if (x < 0 || y < 0 || x >= w || y >= h) && border == BorderPolicy::Error {
            return Err(Error::OutOfBounds {
                x: x as f64,
                y: y as f64,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize))
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Reads a binary PGM or, for `.emss`, a raw grid with `height` rows.
    pub fn read(path: &Path) -> Result<Frame> {
        if path.extension().is_some_and(|e| e == "emss") {
            return Frame::from_grid(&io::read_emss(path)?);
        }
        let bytes = std::fs::read(path)?;
        let (w, h, pixels) = io::decode_pgm(&bytes)?;
        Frame::new(w, h, pixels.into_iter().map(f64::from).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "emss") {
            return io::write_emss(path, &self.to_grid());
        }
        std::fs::write(path, io::encode_pgm(self.width, self.height, &self.to_bytes()))?;
        Ok(())
    }

    /// Rounded and clamped to `0..=255`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_grid(grid: &Grid) -> Result<Frame> {
        if grid.mask.as_ref().is_some_and(|m| m.iter().any(|b| *b)) {
            return Err(Error::InvalidData("frames cannot have missing pixels".into()));
        }
        Frame::new(grid.cols, grid.rows, grid.values.clone())
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            rows: self.height,
            cols: self.width,
            values: self.data.clone(),
            mask: None,
        }
    }
}

/// Bilinear value and gradient at a real position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub gradient: [f64; 2],
}

/// One cell: `f00` at the origin, `f10` one step along x, `f01` one step
/// along y, `f11` diagonal; `tx`, `ty` the fractional offsets.
/// The gradient is the backward-difference form, linear in the other axis.
pub fn bilinear_cell(f00: f64, f10: f64, f01: f64, f11: f64, tx: f64, ty: f64) -> Sample {
    let value = (1.0 - tx) * (1.0 - ty) * f00
        + tx * (1.0 - ty) * f10
        + (1.0 - tx) * ty * f01
        + tx * ty * f11;
    let gx = (1.0 - ty) * (f10 - f00) + ty * (f11 - f01);
    let gy = (1.0 - tx) * (f01 - f00) + tx * (f11 - f10);
    Sample {
        value,
        gradient: [gx, gy],
    }
}

/// Cell origin and offset along one axis. The last cell is reused at the far
/// edge so that `pos = len - 1` is exact with offset 1.
#[inline]
fn cell(pos: f64, len: usize) -> (usize, f64) {
    let origin = (pos.floor() as usize).min(len - 2);
    (origin, pos - origin as f64)
}

pub fn bilinear_sample(f: &Frame, x: f64, y: f64, border: BorderPolicy) -> Result<Sample> {
    let (wmax, hmax) = ((f.width - 1) as f64, (f.height - 1) as f64);
    let inside = (0.0..=wmax).contains(&x) && (0.0..=hmax).contains(&y);
    if !inside {
        if border == BorderPolicy::Error || !x.is_finite() || !y.is_finite() {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: f.width,
                height: f.height,
            });
        }
    }
    let (x, y) = (x.clamp(0.0, wmax), y.clamp(0.0, hmax));
    let (x0, tx) = cell(x, f.width);
    let (y0, ty) = cell(y, f.height);
    Ok(bilinear_cell(
        f.at(x0, y0),
        f.at(x0 + 1, y0),
        f.at(x0, y0 + 1),
        f.at(x0 + 1, y0 + 1),
        tx,
        ty,
    ))
}

/// Displaced frame difference `cur(r) - prev(r - d)`.
pub fn dfd(prev: &Frame, cur: &Frame, x: isize, y: isize, d: [f64; 2], border: BorderPolicy) -> Result<f64> {
    let here = cur.pixel(x, y, border)?;
    let (cx, cy) = clamp_point(cur, x, y);
    let there = bilinear_sample(prev, cx as f64 - d[0], cy as f64 - d[1], border)?;
    Ok(here - there.value)
}

/// Integer position snapped into the frame.
pub(crate) fn clamp_point(f: &Frame, x: isize, y: isize) -> (isize, isize) {
    (
        x.clamp(0, f.width as isize - 1),
        y.clamp(0, f.height as isize - 1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Frame {
        Frame::from_fn(w, h, |x, _| x as f64).unwrap()
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(1, 5, vec![0.0; 5]).is_err());
        assert!(Frame::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Frame::new(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn cell_examples() {
        let s = bilinear_cell(0.0, 1.0, 1.0, 0.0, 0.5, 0.5);
        assert_eq!(s.value, 0.5);
        let s = bilinear_cell(0.0, 2.0, 1.0, 3.0, 0.25, 0.5);
        assert_eq!(s.value, 1.0);
        assert_eq!(s.gradient, [2.0, 1.0]);
    }

    #[test]
    fn integer_positions_are_exact() {
        let f = Frame::from_fn(4, 3, |x, y| (x * x + 3 * y) as f64).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let s = bilinear_sample(&f, x as f64, y as f64, BorderPolicy::Error).unwrap();
                assert_eq!(s.value, f.at(x, y));
            }
        }
        let s = bilinear_sample(&f, 1.0, 1.0, BorderPolicy::Error).unwrap();
        assert_eq!(s.gradient, [f.at(2, 1) - f.at(1, 1), f.at(1, 2) - f.at(1, 1)]);
    }

    #[test]
    fn border_policies() {
        let f = ramp(4, 4);
        assert!(matches!(
            bilinear_sample(&f, -0.5, 1.0, BorderPolicy::Error),
            Err(Error::OutOfBounds { .. })
        ));
        let s = bilinear_sample(&f, -0.5, 1.0, BorderPolicy::Clamp).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(f.pixel(7, -2, BorderPolicy::Clamp).unwrap(), 3.0);
        assert!(f.pixel(7, 0, BorderPolicy::Error).is_err());
    }

    #[test]
    fn dfd_examples() {
        let f = ramp(8, 6);
        assert_eq!(dfd(&f, &f, 3, 2, [0.0, 0.0], BorderPolicy::Clamp).unwrap(), 0.0);
        for x in 1..7 {
            assert_eq!(dfd(&f, &f, x, 2, [0.5, 0.0], BorderPolicy::Clamp).unwrap(), 0.5);
        }
        let tex = Frame::from_fn(8, 6, |x, y| ((x * 7 + y * 13) % 11) as f64).unwrap();
        let shifted = Frame::from_fn(8, 6, |x, y| tex.at(x.saturating_sub(1), y)).unwrap();
        for x in 1..8 {
            assert_eq!(dfd(&tex, &shifted, x, 3, [1.0, 0.0], BorderPolicy::Error).unwrap(), 0.0);
        }
    }

    #[test]
    fn pgm_and_emss_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::from_fn(5, 3, |x, y| (x * 40 + y) as f64).unwrap();
        let pgm = dir.path().join("f.pgm");
        f.write(&pgm).unwrap();
        assert_eq!(Frame::read(&pgm).unwrap(), f);
        let raw = Frame::from_fn(5, 3, |x, y| x as f64 * 0.1 - y as f64).unwrap();
        let emss = dir.path().join("f.emss");
        raw.write(&emss).unwrap();
        assert_eq!(Frame::read(&emss).unwrap(), raw);
    }

    proptest! {
        #[test]
        fn exact_on_bilinear_functions(
            a in -10.0f64..10.0, b in -10.0f64..10.0, c in -10.0f64..10.0, d in -1.0f64..1.0,
            x in 0.0f64..9.0, y in 0.0f64..6.0,
        ) {
            let f = Frame::from_fn(10, 7, |i, j| {
                let (i, j) = (i as f64, j as f64);
                a + b * i + c * j + d * i * j
            }).unwrap();
            let s = bilinear_sample(&f, x, y, BorderPolicy::Error).unwrap();
            let exact = a + b * x + c * y + d * x * y;
            prop_assert!((s.value - exact).abs() < 1e-12 * (1.0 + exact.abs()));
        }
    }
}
