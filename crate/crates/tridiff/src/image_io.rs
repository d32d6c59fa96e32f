//! PNG encoding of channel-first images.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use tridiff_core::Tensor;

use crate::error::{CliError, CliResult};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` image with values in `[0, 1]` as 8-bit RGB.
pub fn save_rgb(path: &Path, img: &Tensor<f64>) -> CliResult<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    buf.save(path).map_err(|e| CliError::format(path, e.to_string()))
}

/// Reads an RGB PNG as a `[3, H, W]` image in `[0, 1]`.
pub fn load_rgb(path: &Path) -> CliResult<Tensor<f64>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => CliError::io(path, io),
            e => CliError::format(path, e.to_string()),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}

/// Writes an `[H, W]` depth map as 16-bit gray, `near` to 0 and `far` to 65535.
pub fn save_depth(path: &Path, depth: &Tensor<f64>, near: f64, far: f64) -> CliResult<()> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let d = depth.data();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (d[y as usize * w + x as usize] - near) / (far - near);
        Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| CliError::format(path, e.to_string()))
}

/// Reads a 16-bit depth PNG back into world units.
pub fn load_depth(path: &Path, near: f64, far: f64) -> CliResult<Tensor<f64>> {
    let img = image::open(path).map_err(|e| CliError::format(path, e.to_string()))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| near + (far - near) * p[0] as f64 / 65535.0).collect();
    Ok(Tensor::new(&[h, w], data)?)
}
