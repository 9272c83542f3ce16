//! Synthetic test sequences with known motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::frame::{bilinear_sample, BorderPolicy, Frame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    /// Unit direction of propagation.
    pub direction: [f64; 2],
    pub wavelength: f64,
    pub phase: f64,
}

/// Smooth texture `128 + sum a sin(2 pi (k . r) / wavelength + phase)`,
/// defined at every real position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub waves: Vec<Wave>,
}

impl Scene {
    /// `components` waves with wavelengths in 16..40 px and amplitudes summing to 100.
    pub fn random(seed: u64, components: usize) -> Scene {
        Scene::random_band(seed, components, [16.0, 40.0])
    }

    /// As [`Scene::random`] with wavelengths drawn from `band` (pixels).
    pub fn random_band(seed: u64, components: usize, band: [f64; 2]) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves: Vec<Wave> = (0..components.max(1))
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Wave {
                    amplitude: rng.random_range(0.5..1.0),
                    direction: [angle.cos(), angle.sin()],
                    wavelength: rng.random_range(band[0]..band[1]),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let total: f64 = waves.iter().map(|w| w.amplitude).sum();
        for w in &mut waves {
            w.amplitude *= 100.0 / total;
        }
        Scene { waves }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        128.0
            + self
                .waves
                .iter()
                .map(|w| {
                    let t = (w.direction[0] * x + w.direction[1] * y) / w.wavelength;
                    w.amplitude * (std::f64::consts::TAU * t + w.phase).sin()
                })
                .sum::<f64>()
    }

    /// The scene moved by `shift`: pixel `r` shows `value(r - shift)`.
    pub fn render(&self, width: usize, height: usize, shift: [f64; 2]) -> Result<Frame> {
        Frame::from_fn(width, height, |x, y| {
            self.value(x as f64 - shift[0], y as f64 - shift[1])
        })
    }
}

/// `out(r) = f(r - d)` by bilinear interpolation, clamped at the borders.
pub fn shift_frame_bilinear(f: &Frame, d: [f64; 2]) -> Result<Frame> {
    let mut data = Vec::with_capacity(f.width() * f.height());
    for y in 0..f.height() {
        for x in 0..f.width() {
            data.push(bilinear_sample(f, x as f64 - d[0], y as f64 - d[1], BorderPolicy::Clamp)?.value);
        }
    }
    Frame::new(f.width(), f.height(), data)
}

/// Adds white Gaussian noise with `signal variance / noise variance = 10^(snr_db / 10)`.
pub fn add_noise(f: &Frame, snr_db: f64, seed: u64) -> Result<Frame> {
    if !snr_db.is_finite() {
        return Err(Error::config("SNR must be finite"));
    }
    let n = f.data().len() as f64;
    let mean = f.data().iter().sum::<f64>() / n;
    let var = f.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = (var / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = f
        .data()
        .iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + sigma * e
        })
        .collect();
    Frame::new(f.width(), f.height(), data)
}

/// Frames `0..count` of a scene drifting by `velocity` per frame.
pub fn sequence(scene: &Scene, width: usize, height: usize, velocity: [f64; 2], count: usize) -> Result<Vec<Frame>> {
    (0..count)
        .map(|k| {
            let k = k as f64;
            scene.render(width, height, [velocity[0] * k, velocity[1] * k])
        })
        .collect()
}
