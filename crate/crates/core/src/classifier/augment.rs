//! Random flips, rotation, zoom and contrast on `[3, H, W]` pixel tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Rotation angle is uniform in `[-max, max]` degrees.
    pub max_rotation_degrees: f64,
    /// Uniform scale range; values below 1 zoom out.
    pub zoom_range: (f64, f64),
    /// Uniform contrast factor range, applied around each channel mean.
    pub contrast_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            horizontal_flip: true,
            vertical_flip: true,
            max_rotation_degrees: 36.0,
            zoom_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Index into `[0, n)` reflecting about the edges (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// One random draw of the augmentation stack applied to `img`, whose values
/// are raw pixel intensities in `[0, 255]`.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    if !cfg.enabled {
        return img.clone();
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let flip_x = cfg.horizontal_flip && rng.random_bool(0.5);
    let flip_y = cfg.vertical_flip && rng.random_bool(0.5);
    let angle = if cfg.max_rotation_degrees > 0.0 {
        rng.random_range(-cfg.max_rotation_degrees..=cfg.max_rotation_degrees).to_radians()
    } else {
        0.0
    };
    let zoom = sample_range(rng, cfg.zoom_range);
    let contrast = sample_range(rng, cfg.contrast_range);

    // Output pixel p samples source c + R(-angle) (p - c) / zoom.
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let src = img.data();
    let mut out = vec![0f32; img.numel()];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / zoom;
            let dy = (y as f64 - cy) / zoom;
            let mut sx = cx + cos * dx + sin * dy;
            let mut sy = cy - sin * dx + cos * dy;
            if flip_x {
                sx = w as f64 - 1.0 - sx;
            }
            if flip_y {
                sy = h as f64 - 1.0 - sy;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (xa, xb) = (reflect(x0, w), reflect(x0 + 1, w));
            let (ya, yb) = (reflect(y0, h), reflect(y0 + 1, h));
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let top = plane[ya * w + xa] * (1.0 - fx) + plane[ya * w + xb] * fx;
                let bottom = plane[yb * w + xa] * (1.0 - fx) + plane[yb * w + xb] * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    for plane in out.chunks_mut(h * w) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
        for v in plane.iter_mut() {
            *v = ((*v as f64 - mean) * contrast + mean).clamp(0.0, 255.0) as f32;
        }
    }
    Tensor::from_vec(img.shape().to_vec(), out).expect("same shape")
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
