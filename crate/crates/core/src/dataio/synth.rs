//! Procedural vessel-like images for desk-scale experiments.
//!
//! Each image carries 2–5 random polylines of width 1–3 px drawn darker than
//! a smooth, textured reddish background. The image darkens each pixel by
//! the stroke's anti-aliased coverage, a one-pixel ramp around the stroke
//! edge; the annotation marks exactly the pixels with non-zero coverage, so
//! every darkened pixel is labelled vessel.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::RetinalSample;
use crate::error::{Error, Result};

/// Accepted range for the fraction of foreground pixels in a generated mask.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.20);

const MAX_ATTEMPTS: usize = 1000;

struct Polyline {
    points: Vec<(f64, f64)>,
    half_width: f64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn random_polyline<R: Rng + ?Sized>(size: f64, rng: &mut R) -> Polyline {
    let vertices = rng.random_range(3..=6);
    let mut pos = (rng.random_range(0.0..size), rng.random_range(0.0..size));
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let turn = Normal::new(0.0, 0.5).expect("finite sigma");
    let mut points = vec![pos];
    for _ in 1..vertices {
        let step = rng.random_range(0.15..0.35) * size;
        heading += turn.sample(rng);
        pos = (pos.0 + step * heading.cos(), pos.1 + step * heading.sin());
        points.push(pos);
    }
    Polyline {
        points,
        half_width: rng.random_range(1.0..=3.0) / 2.0,
    }
}

fn render<R: Rng + ?Sized>(id: String, size: usize, rng: &mut R) -> RetinalSample {
    let n_lines = rng.random_range(2..=5);
    let lines: Vec<Polyline> = (0..n_lines).map(|_| random_polyline(size as f64, rng)).collect();

    let base = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.35..0.50),
        rng.random_range(0.15..0.30),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.04..0.10),
            )
        })
        .collect();
    let contrast = rng.random_range(0.45..0.65);
    let grain = Normal::new(0.0, 0.015).expect("finite sigma");

    let mut gt = Array2::<u8>::zeros((size, size));
    let mut image = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut coverage: f64 = 0.0;
            for line in &lines {
                let d = line
                    .points
                    .windows(2)
                    .map(|s| segment_distance(p, s[0], s[1]))
                    .fold(f64::INFINITY, f64::min);
                if d < line.half_width + 0.5 {
                    gt[[y, x]] = 1;
                }
                coverage = coverage.max((line.half_width + 0.5 - d).clamp(0.0, 1.0));
            }
            let texture: f64 = 1.0
                + waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (fx * p.0 + ph).sin() * (fy * p.1 - ph).cos())
                    .sum::<f64>();
            for (c, &b) in base.iter().enumerate() {
                let v = b * texture * (1.0 - contrast * coverage) + grain.sample(rng);
                image[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    RetinalSample {
        id,
        image,
        gt,
        fov: None,
    }
}

/// Generates `n` samples of `size`×`size` pixels. Draws whose foreground
/// fraction falls outside [`FOREGROUND_RANGE`] are rejected and redrawn.
pub fn synth_vessels<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Result<Vec<RetinalSample>> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("synthetic size must be >= 16, got {size}")));
    }
    let (lo, hi) = FOREGROUND_RANGE;
    (0..n)
        .map(|i| {
            for _ in 0..MAX_ATTEMPTS {
                let s = render(format!("synth_{i:04}"), size, rng);
                let f = s.foreground_fraction();
                if (lo..=hi).contains(&f) {
                    return Ok(s);
                }
            }
            Err(Error::InvalidArgument(format!(
                "could not draw a sample with foreground in [{lo}, {hi}] at size {size}"
            )))
        })
        .collect()
}
