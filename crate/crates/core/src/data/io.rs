//! 8-bit grayscale PNG reading and writing.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::tensor::kernels;

/// Grayscale image with values in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("gray-image", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    /// Bilinear resize to `h x w`.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        Self { h, w, data: kernels::bilinear(&self.data, 1, self.h, self.w, h, w) }
    }
}

/// Nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray(path: &Path, h: usize, w: usize, data: &[f64]) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::shape("write-image", format!("{} values for {h}x{w}", data.len())));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([quantize(data[y as usize * w + x as usize])]));
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.into(), source })
}

/// Reads a PNG as grayscale in `[0,1]`, optionally resizing to `resize = (h, w)`.
pub fn read_gray(path: &Path, resize: Option<(usize, usize)>) -> Result<Gray> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.into(), source })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let g = Gray { h, w, data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect() };
    Ok(match resize {
        Some((rh, rw)) => g.resized(rh, rw),
        None => g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = (0..35).map(|i| (i as f64 * 0.037) % 1.0).collect();
        write_gray(&p, 5, 7, &data).unwrap();
        let g = read_gray(&p, None).unwrap();
        assert_eq!((g.h, g.w), (5, 7));
        for (a, b) in data.iter().zip(&g.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn constant_exact_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_gray(&p, 128, 128, &vec![0.2; 128 * 128]).unwrap();
        let g = read_gray(&p, Some((64, 64))).unwrap();
        assert_eq!((g.h, g.w), (64, 64));
        let q = quantize(0.2) as f64 / 255.0;
        assert!(g.data.iter().all(|&v| v == q));
    }

    #[test]
    fn corrupt_and_missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        let e = read_gray(&p, None).unwrap_err().to_string();
        assert!(e.contains("bad.png"), "{e}");
        let e = read_gray(&dir.path().join("none.png"), None).unwrap_err().to_string();
        assert!(e.contains("none.png"), "{e}");
    }
}
