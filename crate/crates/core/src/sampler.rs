//! Ancestral sampling from a trained checkpoint.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm_trainer::{load_checkpoint, WEIGHTS_FILE};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::imageio;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::util;

pub const GENERATION_META_FILE: &str = "generation_meta.json";

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    /// `[C, H, W]` of a single sample.
    fn sample_shape(&self) -> [usize; 3];
    fn predict(&self, x_t: &Tensor, timesteps: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn sample_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.in_channels, c.sample_size, c.sample_size]
    }

    fn predict(&self, x_t: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        self.predict_noise(x_t, timesteps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub num_images: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub batch_size: usize,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.num_images < 1 {
            return Err(Error::config("num_images must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub num_timesteps: usize,
    pub count: usize,
    pub batch_size: usize,
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct GenerationOutcome {
    pub paths: Vec<PathBuf>,
    /// Reverse steps executed per batch; always equals T.
    pub steps_per_batch: Vec<usize>,
}

pub fn image_file_name(seed: u64, index: usize) -> String {
    format!("gen_{seed}_{index:04}.png")
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` down to `x_0` for one
/// batch. Returns the final tensor and the number of steps taken.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, usize)> {
    let [c, h, w] = predictor.sample_shape();
    let shape = vec![n, c, h, w];
    let mut x = Tensor::randn(shape.clone(), rng);
    let mut steps = 0;
    for t in (0..sched.num_timesteps()).rev() {
        let eps_hat = predictor.predict(&x, &vec![t; n])?;
        let z = (t > 0).then(|| Tensor::randn(shape.clone(), rng));
        x = sched.reverse_step(&x, t, &eps_hat, z.as_ref())?;
        steps += 1;
    }
    Ok((x, steps))
}

/// Generates `req.num_images` PNGs with any predictor. Batch `b` draws from
/// RNG stream `b` of `req.seed`.
pub fn generate_with<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    req: &GenerationRequest,
) -> Result<GenerationOutcome> {
    req.validate()?;
    util::create_dir(&req.output_dir)?;
    let mut paths = Vec::with_capacity(req.num_images);
    let mut steps_per_batch = Vec::new();
    let mut index = 0;
    for (b, start) in (0..req.num_images).step_by(req.batch_size).enumerate() {
        let n = req.batch_size.min(req.num_images - start);
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(b as u64);
        let (x, steps) = sample_batch(predictor, sched, n, &mut rng)?;
        steps_per_batch.push(steps);
        for i in 0..n {
            let img = imageio::from_signed_unit(&x.index_leading(i))?;
            let path = req.output_dir.join(image_file_name(req.seed, index));
            imageio::save_png(&img, &path)?;
            paths.push(path);
            index += 1;
        }
        log::info!("generated {index}/{} images", req.num_images);
    }
    Ok(GenerationOutcome { paths, steps_per_batch })
}

/// Loads a checkpoint directory and generates images, recording
/// `generation_meta.json` next to them.
pub fn generate(checkpoint: &Path, req: &GenerationRequest) -> Result<Vec<PathBuf>> {
    let (denoiser, sched, _) = load_checkpoint(checkpoint)?;
    let out = generate_with(&denoiser, &sched, req)?;
    let meta = GenerationMeta {
        checkpoint_sha256: util::sha256_file(&checkpoint.join(WEIGHTS_FILE))?,
        seed: req.seed,
        num_timesteps: sched.num_timesteps(),
        count: out.paths.len(),
        batch_size: req.batch_size,
        files: out
            .paths
            .iter()
            .map(|p| p.file_name().expect("file name").to_string_lossy().into_owned())
            .collect(),
    };
    util::write_json(&req.output_dir.join(GENERATION_META_FILE), &meta)?;
    Ok(out.paths)
}

/// Grid dimensions `(rows, cols)` for `n` tiles with at most `cols` columns.
pub fn grid_layout(n: usize, cols: usize) -> (usize, usize) {
    let cols = cols.max(1).min(n.max(1));
    (n.div_ceil(cols), cols)
}

/// Row-major montage of equally sized images. Tiles take the size of the
/// first image; others are resized to it.
pub fn preview_grid(paths: &[PathBuf], cols: usize, out: &Path) -> Result<PathBuf> {
    if paths.is_empty() {
        return Err(Error::Empty("preview grid needs at least one image".into()));
    }
    let tiles = paths
        .iter()
        .map(|p| imageio::load_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    let (tw, th) = tiles[0].dimensions();
    let (rows, cols) = grid_layout(tiles.len(), cols);
    let mut canvas = image::RgbImage::new(tw * cols as u32, th * rows as u32);
    for (i, tile) in tiles.iter().enumerate() {
        let tile = if tile.dimensions() == (tw, th) {
            tile.clone()
        } else {
            image::imageops::resize(tile, tw, th, image::imageops::FilterType::Triangle)
        };
        let (r, c) = (i / cols, i % cols);
        image::imageops::replace(&mut canvas, &tile, (c as u32 * tw) as i64, (r as u32 * th) as i64);
    }
    imageio::save_png(&canvas, out)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    /// Knows the single training image; recovers the exact noise from `x_t`.
    struct Oracle {
        x0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn sample_shape(&self) -> [usize; 3] {
            let s = self.x0.shape();
            [s[0], s[1], s[2]]
        }

        fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
            let n = ts.len();
            let inner = self.x0.numel();
            let mut out = x_t.clone();
            for (i, &t) in ts.iter().enumerate() {
                let ab = self.sched.alpha_bars()[t];
                for (j, o) in out.data_mut()[i * inner..(i + 1) * inner].iter_mut().enumerate() {
                    *o = ((*o as f64 - ab.sqrt() * self.x0.data()[j] as f64) / (1.0 - ab).sqrt()) as f32;
                }
            }
            debug_assert_eq!(out.dim(0), n);
            Ok(out)
        }
    }

    struct Huge;

    impl NoisePredictor for Huge {
        fn sample_shape(&self) -> [usize; 3] {
            [3, 4, 4]
        }

        fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
            let sign = if ts[0] % 2 == 0 { 1e6 } else { -1e6 };
            Ok(x_t.map(|v| sign * (1.0 + v.abs())))
        }
    }

    fn req(dir: &Path, n: usize, seed: u64) -> GenerationRequest {
        GenerationRequest {
            num_images: n,
            seed,
            output_dir: dir.to_path_buf(),
            batch_size: 2,
        }
    }

    #[test]
    fn single_step_oracle_reproduces_constant_image() {
        let sched = make_linear_schedule(1, 0.02, 0.02).unwrap();
        let value = 0.3f32;
        let oracle = Oracle {
            x0: Tensor::full(vec![3, 4, 4], value),
            sched: sched.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let out = generate_with(&oracle, &sched, &req(dir.path(), 3, 1)).unwrap();
        let expected = ((value as f64 + 1.0) / 2.0 * 255.0) as i32;
        for p in &out.paths {
            let img = imageio::load_rgb(p).unwrap();
            assert!(img.pixels().all(|px| px.0.iter().all(|&c| (c as i32 - expected).abs() <= 1)));
        }
        assert_eq!(out.steps_per_batch, vec![1, 1]);
    }

    #[test]
    fn adversarial_predictor_output_is_clamped() {
        let sched = make_linear_schedule(5, 1e-4, 0.02).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = generate_with(&Huge, &sched, &req(dir.path(), 2, 0)).unwrap();
        assert_eq!(out.steps_per_batch, vec![5]);
        for p in &out.paths {
            let img = imageio::load_rgb(p).unwrap();
            assert_eq!(img.dimensions(), (4, 4));
            assert!(img.pixels().all(|px| px.0.iter().all(|&c| c == 0 || c == 255)));
        }
    }

    #[test]
    fn naming_and_determinism() {
        let sched = make_linear_schedule(4, 1e-4, 0.02).unwrap();
        let oracle = Oracle {
            x0: Tensor::full(vec![3, 4, 4], -0.2),
            sched: sched.clone(),
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = generate_with(&oracle, &sched, &req(a.path(), 3, 9)).unwrap().paths;
        let pb = generate_with(&oracle, &sched, &req(b.path(), 3, 9)).unwrap().paths;
        let names: Vec<_> = pa.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["gen_9_0000.png", "gen_9_0001.png", "gen_9_0002.png"]);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn zero_images_rejected() {
        let sched = make_linear_schedule(2, 1e-4, 0.02).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_with(&Huge, &sched, &req(dir.path(), 0, 0)).is_err());
    }

    #[test]
    fn grid_layouts() {
        assert_eq!(grid_layout(6, 3), (2, 3));
        assert_eq!(grid_layout(1, 4), (1, 1));
        assert_eq!(grid_layout(60, 10), (6, 10));
        assert_eq!(grid_layout(7, 3), (3, 3));
    }

    #[test]
    fn preview_grid_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<PathBuf> = (0..6)
            .map(|i| {
                let p = dir.path().join(format!("{i}.png"));
                image::RgbImage::from_pixel(5, 4, image::Rgb([i as u8 * 40, 0, 0])).save(&p).unwrap();
                p
            })
            .collect();
        let out = preview_grid(&paths, 3, &dir.path().join("grid.png")).unwrap();
        let g = imageio::load_rgb(&out).unwrap();
        assert_eq!(g.dimensions(), (15, 8));
        assert_eq!(g.get_pixel(5, 0).0[0], 40);
        assert_eq!(g.get_pixel(0, 4).0[0], 120);
        assert!(preview_grid(&[], 3, &dir.path().join("x.png")).is_err());
    }
}
