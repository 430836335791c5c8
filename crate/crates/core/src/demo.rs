//! Procedural stand-in corpus: smooth bottle-like images, with defective
//! samples carrying a textured Gaussian-blob blemish.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::ingestion::Label;
use crate::util;

pub const NON_DEFECTIVE_DIR: &str = "good";
pub const DEFECTIVE_DIR: &str = "broken";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoCorpusSpec {
    pub non_defective: usize,
    pub defective: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DemoCorpusSpec {
    fn default() -> Self {
        Self {
            non_defective: 100,
            defective: 40,
            size: 64,
            seed: 0,
        }
    }
}

/// One image. Both classes share the ring-shaped body and a smooth
/// highlight blob; defective images add a high-frequency blemish.
pub fn render_sample<R: Rng + ?Sized>(label: Label, size: usize, rng: &mut R) -> RgbImage {
    let s = size as f64;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-15.0..15.0));
    let (cx, cy) = (s / 2.0 + rng.random_range(-0.05..0.05) * s, s / 2.0 + rng.random_range(-0.05..0.05) * s);
    let ring_r = rng.random_range(0.28..0.36) * s;
    let (hx, hy) = (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
    let hr = rng.random_range(0.08..0.15) * s;
    let (bx, by) = (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
    let br = rng.random_range(0.35..0.5) * s;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let ring = (-((d - ring_r) / (0.08 * s)).powi(2)).exp();
            let highlight = (-((fx - hx).powi(2) + (fy - hy).powi(2)) / (2.0 * hr * hr)).exp();
            let base = 70.0 + 110.0 * ring + 50.0 * highlight;
            let blemish = match label {
                Label::Defective => {
                    let g = (-((fx - bx).powi(2) + (fy - by).powi(2)) / (2.0 * br * br)).exp();
                    g * rng.random_range(-120.0..120.0)
                }
                Label::NonDefective => 0.0,
            };
            let grain = rng.random_range(-4.0..4.0);
            let px: [u8; 3] = std::array::from_fn(|c| (base + tint[c] + blemish + grain).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Writes `<root>/good/*.png` and `<root>/broken/*.png` and returns the two
/// directories.
pub fn write_demo_corpus(root: &Path, spec: &DemoCorpusSpec) -> Result<(PathBuf, PathBuf)> {
    if spec.non_defective == 0 || spec.defective == 0 || spec.size < 8 {
        return Err(Error::config("demo corpus needs both classes and size >= 8"));
    }
    let good = root.join(NON_DEFECTIVE_DIR);
    let broken = root.join(DEFECTIVE_DIR);
    for (dir, label, n, stream) in [
        (&good, Label::NonDefective, spec.non_defective, 1),
        (&broken, Label::Defective, spec.defective, 2),
    ] {
        util::create_dir(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        for i in 0..n {
            let img = render_sample(label, spec.size, &mut rng);
            imageio::save_png(&img, &dir.join(format!("{i:04}.png")))?;
        }
    }
    Ok((good, broken))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = DemoCorpusSpec {
            non_defective: 3,
            defective: 2,
            size: 16,
            seed: 9,
        };
        write_demo_corpus(a.path(), &spec).unwrap();
        write_demo_corpus(b.path(), &spec).unwrap();
        for rel in ["good/0002.png", "broken/0001.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
        assert!(!a.path().join("broken/0002.png").exists());
    }

    #[test]
    fn defective_images_are_rougher() {
        let roughness = |img: &RgbImage| {
            let mut acc = 0.0;
            for y in 0..img.height() {
                for x in 1..img.width() {
                    acc += (img.get_pixel(x, y)[0] as f64 - img.get_pixel(x - 1, y)[0] as f64).abs();
                }
            }
            acc
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let good = render_sample(Label::NonDefective, 32, &mut rng);
        let bad = render_sample(Label::Defective, 32, &mut rng);
        assert!(roughness(&bad) > 2.0 * roughness(&good));
    }
}
