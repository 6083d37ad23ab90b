//! Synthetic lesion images: textured skin-like backgrounds with one to three
//! dark ellipses, brightness gradients, noise and hair-like curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Scales noise, texture, gradient and hair; 1.0 is the default.
    pub difficulty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 250,
            size: 64,
            seed: 0,
            difficulty: 1.0,
        }
    }
}

/// Rotated ellipse in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalized radius of pixel `(x, y)`'s centre; `< 1` inside.
    pub fn radius(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.radius(x, y) < 1.0
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"synthdat");
    ChaCha8Rng::from_seed(key)
}

fn draw_ellipses(rng: &mut ChaCha8Rng, size: usize) -> Vec<Ellipse> {
    let s = size as f64;
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| Ellipse {
            cx: rng.gen_range(0.25..0.75) * s,
            cy: rng.gen_range(0.25..0.75) * s,
            a: rng.gen_range(0.08..0.22) * s,
            b: rng.gen_range(0.08..0.22) * s,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

/// The lesion layout of sample `index`; the mask of that sample is exactly
/// the union of these ellipses.
pub fn synth_ellipses(seed: u64, index: usize, size: usize) -> Vec<Ellipse> {
    draw_ellipses(&mut sample_rng(seed, index), size)
}

fn generate_one(index: usize, size: usize, seed: u64, difficulty: f64) -> Sample {
    let mut rng = sample_rng(seed, index);
    let ellipses = draw_ellipses(&mut rng, size);
    let s = size as f64;
    let d = difficulty.max(0.0);

    let skin = [
        0.78 + rng.gen_range(-0.08..0.08),
        0.60 + rng.gen_range(-0.08..0.08),
        0.50 + rng.gen_range(-0.08..0.08),
    ];
    let lesion: Vec<[f64; 4]> = ellipses
        .iter()
        .map(|_| {
            [
                0.42 + rng.gen_range(-0.08..0.08),
                0.28 + rng.gen_range(-0.06..0.06),
                0.22 + rng.gen_range(-0.06..0.06),
                rng.gen_range(0.7..0.95),
            ]
        })
        .collect();
    let grad_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let grad_amp = rng.gen_range(0.0..0.15) * d;
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(2.0..8.0) * std::f64::consts::TAU / s,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::PI),
                0.02 * d,
            ]
        })
        .collect();

    let plane = size * size;
    let mut img = vec![0.0f64; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let light = 1.0 + 2.0 * grad_amp * (fx * grad_dir.cos() + fy * grad_dir.sin());
            let tex: f64 = waves
                .iter()
                .map(|w| {
                    let t = x as f64 * w[2].cos() + y as f64 * w[2].sin();
                    w[3] * (w[0] * t + w[1]).sin()
                })
                .sum();
            let mut px = [skin[0] + tex, skin[1] + tex, skin[2] + tex];
            for (e, col) in ellipses.iter().zip(&lesion) {
                let r = e.radius(x, y);
                if r < 1.0 {
                    mask[y * size + x] = 1.0;
                    // Slightly darker towards the centre.
                    let alpha = col[3] * (1.0 - 0.15 * r);
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + col[c] * alpha;
                    }
                }
            }
            for c in 0..3 {
                img[c * plane + y * size + x] = px[c] * light;
            }
        }
    }

    let hairs = rng.gen_range(0..=(3.0 * d).round() as usize);
    for _ in 0..hairs {
        let p0 = [rng.gen_range(0.0..s), 0.0];
        let p1 = [rng.gen_range(0.0..s), rng.gen_range(0.0..s)];
        let p2 = [rng.gen_range(0.0..s), s];
        let (p0, p2) = if rng.gen_bool(0.5) {
            (p0, p2)
        } else {
            ([0.0, p0[0]], [s, p2[0]])
        };
        let width = rng.gen_range(0.5..1.0);
        let steps = 4 * size;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let q = |i: usize| (1.0 - t).powi(2) * p0[i] + 2.0 * (1.0 - t) * t * p1[i] + t * t * p2[i];
            let (hx, hy) = (q(0), q(1));
            let (x0, x1) = (
                (hx - width).floor().max(0.0) as usize,
                ((hx + width).ceil() as usize).min(size),
            );
            let (y0, y1) = (
                (hy - width).floor().max(0.0) as usize,
                ((hy + width).ceil() as usize).min(size),
            );
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let dd = ((xx as f64 + 0.5 - hx).powi(2) + (yy as f64 + 0.5 - hy).powi(2)).sqrt();
                    if dd <= width {
                        for (c, dark) in [0.18, 0.12, 0.10].iter().enumerate() {
                            img[c * plane + yy * size + xx] = *dark;
                        }
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, 0.02 * d + 1e-12).expect("finite std");
    let data: Vec<f32> = img
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Sample {
        id: format!("synth{index:05}"),
        image: Tensor::from_vec(Shape::new(1, 3, size, size), data).expect("sized buffer"),
        mask: Tensor::from_vec(Shape::new(1, 1, size, size), mask).expect("sized buffer"),
    }
}

/// `count` deterministic samples of side `size` (a multiple of 16).
pub fn synth_generate(count: usize, size: usize, seed: u64, difficulty: f64) -> Result<Vec<Sample>> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::config(format!(
            "synthetic size must be a multiple of 16, got {size}"
        )));
    }
    if !(difficulty.is_finite() && difficulty >= 0.0) {
        return Err(Error::config("difficulty must be a non-negative number"));
    }
    use rayon::prelude::*;
    Ok((0..count)
        .into_par_iter()
        .map(|i| generate_one(i, size, seed, difficulty))
        .collect())
}
