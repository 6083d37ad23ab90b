//! Paired geometric augmentation: flip, then rotate, then shift.

use rand::Rng;

use crate::tensor::Tensor;

use super::config::AugmentConfig;

/// One drawn transform.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_degrees: f64,
    /// Shift in pixels, `(x, y)`.
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let p = cfg.probability;
        let mut out = Self {
            hflip: cfg.horizontal_flip && rng.gen_bool(p),
            vflip: cfg.vertical_flip && rng.gen_bool(p),
            ..Self::default()
        };
        if cfg.rotation_degrees > 0.0 && rng.gen_bool(p) {
            out.angle_degrees = rng.gen_range(-cfg.rotation_degrees..=cfg.rotation_degrees);
        }
        if cfg.shift_fraction > 0.0 && rng.gen_bool(p) {
            let f = cfg.shift_fraction;
            out.shift = (
                rng.gen_range(-f..=f) * width as f64,
                rng.gen_range(-f..=f) * height as f64,
            );
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.angle_degrees == 0.0 && self.shift == (0.0, 0.0)
    }

    /// Source position (continuous, pixel centres at `i + 0.5`) of output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: f64, h: f64) -> (f64, f64) {
        let (mut px, mut py) = (x as f64 + 0.5 - self.shift.0, y as f64 + 0.5 - self.shift.1);
        if self.angle_degrees != 0.0 {
            let (s, c) = (-self.angle_degrees.to_radians()).sin_cos();
            let (dx, dy) = (px - w / 2.0, py - h / 2.0);
            px = w / 2.0 + c * dx - s * dy;
            py = h / 2.0 + s * dx + c * dy;
        }
        if self.hflip {
            px = w - px;
        }
        if self.vflip {
            py = h - py;
        }
        (px, py)
    }
}

/// Folds a continuous coordinate into `[0, n]` by mirroring at the borders.
fn reflect(c: f64, n: usize) -> f64 {
    let n = n as f64;
    let m = c.rem_euclid(2.0 * n);
    if m > n {
        2.0 * n - m
    } else {
        m
    }
}

/// Applies `params` to every plane: bilinear for the image, nearest for the
/// mask, reflection for positions that fall outside.
pub fn apply_augment(image: &Tensor<f32>, mask: &Tensor<f32>, params: &AugmentParams) -> (Tensor<f32>, Tensor<f32>) {
    if params.is_identity() {
        return (image.clone(), mask.clone());
    }
    let s = image.shape();
    let (w, h) = (s.width, s.height);
    let mut img = Tensor::zeros(s);
    let mut msk = Tensor::zeros(mask.shape());
    for y in 0..h {
        for x in 0..w {
            let (px, py) = params.source(x, y, w as f64, h as f64);
            let (rx, ry) = (reflect(px, w), reflect(py, h));
            // Nearest neighbour for the mask.
            let nx = (rx.floor() as usize).min(w - 1);
            let ny = (ry.floor() as usize).min(h - 1);
            for c in 0..mask.shape().channels {
                msk.set(0, c, y, x, mask.at(0, c, ny, nx));
            }
            // Bilinear for the image, in index space.
            let (u, v) = ((rx - 0.5).max(0.0), (ry - 0.5).max(0.0));
            let (x0, y0) = ((u.floor() as usize).min(w - 1), (v.floor() as usize).min(h - 1));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((u - x0 as f64) as f32, (v - y0 as f64) as f32);
            for c in 0..s.channels {
                let a = image.at(0, c, y0, x0) * (1.0 - fx) + image.at(0, c, y0, x1) * fx;
                let b = image.at(0, c, y1, x0) * (1.0 - fx) + image.at(0, c, y1, x1) * fx;
                img.set(0, c, y, x, a * (1.0 - fy) + b * fy);
            }
        }
    }
    (img, msk)
}

/// Draws a transform from `rng` and applies it to the pair.
pub fn augment<R: Rng>(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Tensor<f32>, Tensor<f32>) {
    let s = image.shape();
    let params = AugmentParams::sample(cfg, s.width, s.height, rng);
    apply_augment(image, mask, &params)
}
