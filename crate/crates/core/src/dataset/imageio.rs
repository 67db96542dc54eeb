//! PNG reading and writing for images, masks and feature dumps.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Image dimensions without decoding pixel data.
pub fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// An RGB image as a `[1, 3, H, W]` tensor with values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Raw 8-bit single-channel pixels, row-major, with `(width, height)`.
pub fn load_gray(path: &Path) -> Result<(Vec<u8>, u32, u32)> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w, h))
}

/// Writes `[3, H, W]` values in `[0, 1]` (clamped) as an RGB PNG.
pub fn save_rgb(path: &Path, chw: &[f64], h: usize, w: usize) -> Result<()> {
    let plane = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| to_u8(chw[c * plane + i])))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray(path: &Path, pixels: Vec<u8>, h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max normalizes one `[H, W]` plane to 8-bit grayscale.
pub fn normalize_plane(plane: &[f64]) -> Vec<u8> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    plane
        .iter()
        .map(|&v| if span > 0.0 { to_u8((v - lo) / span) } else { 0 })
        .collect()
}
