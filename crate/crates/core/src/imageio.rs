//! Image decoding, resizing and PNG encoding at the tensor boundary.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_rgb8())
}

/// Checks that the header decodes without reading pixel data.
pub fn probe(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn resize_square(img: &RgbImage, size: u32) -> RgbImage {
    if img.width() == size && img.height() == size {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

/// `[3, H, W]` tensor with `f(channel_value)` applied to each byte.
pub fn to_chw(img: &RgbImage, f: impl Fn(u8) -> f32) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f(px.0[c]);
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("chw shape")
}

/// Maps a `[3, H, W]` (or `[1, 3, H, W]`) tensor in `[-1, 1]` to 8-bit RGB:
/// clamp, `(x + 1) / 2 * 255`, round.
pub fn from_signed_unit(t: &Tensor) -> Result<RgbImage> {
    let shape = t.shape();
    let (h, w) = match shape {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                expected: vec![3, 0, 0],
                actual: shape.to_vec(),
            })
        }
    };
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v = d[c * h * w + y as usize * w + x as usize];
            *p = signed_unit_to_byte(v);
        }
        Rgb(px)
    }))
}

pub fn signed_unit_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v as f64 + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_pipeline_clamps_and_rounds() {
        assert_eq!(signed_unit_to_byte(-1.0), 0);
        assert_eq!(signed_unit_to_byte(1.0), 255);
        assert_eq!(signed_unit_to_byte(1e9), 255);
        assert_eq!(signed_unit_to_byte(-1e9), 0);
        assert_eq!(signed_unit_to_byte(f32::NAN), 0);
        assert_eq!(signed_unit_to_byte(0.0), 128);
    }

    #[test]
    fn extension_filter() {
        assert!(has_image_extension(Path::new("a/b.PNG")));
        assert!(has_image_extension(Path::new("x.jpeg")));
        assert!(!has_image_extension(Path::new("notes.txt")));
        assert!(!has_image_extension(Path::new("noext")));
    }
}
