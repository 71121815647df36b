//! 8-bit grayscale PNG input/output and the pixel ↔ model-space mapping.

use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{Error, Result};

/// `x = p/127.5 − 1`.
pub fn to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| f32::from(p) / 127.5 - 1.0).collect()
}

/// Inverse of [`to_unit`], rounding to nearest and clamping.
pub fn from_unit(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
}

/// Decodes any supported image as 8-bit luma.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_luma8())
}

/// Reads an image and resamples it to `side x side` when needed.
pub fn read_square(path: &Path, side: usize) -> Result<Vec<u8>> {
    Ok(resample(read_gray(path)?, side))
}

fn resample(img: GrayImage, side: usize) -> Vec<u8> {
    let s = side as u32;
    let img = if img.width() == s && img.height() == s {
        img
    } else {
        image::imageops::resize(&img, s, s, image::imageops::FilterType::Triangle)
    };
    img.into_raw()
}

/// Resamples a square `from x from` image to `to x to`.
pub fn resize_square(pixels: &[u8], from: usize, to: usize) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(from as u32, from as u32, pixels.to_vec())
        .ok_or_else(|| Error::invalid(format!("{} pixels for a {from}x{from} image", pixels.len())))?;
    Ok(resample(img, to))
}

pub fn write_gray_png(path: &Path, side: usize, pixels: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(side as u32, side as u32, pixels.to_vec())
        .ok_or_else(|| Error::invalid(format!("{} pixels for a {side}x{side} image", pixels.len())))?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_mapping_round_trips_every_level() {
        let all: Vec<u8> = (0..=255).collect();
        let x = to_unit(&all);
        assert_eq!(x[0], -1.0);
        assert_eq!(x[255], 1.0);
        assert_eq!(from_unit(&x), all);
    }

    #[test]
    fn out_of_range_values_clamp() {
        assert_eq!(from_unit(&[-3.0, 5.0]), vec![0, 255]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let px: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
        write_gray_png(&p, 8, &px).unwrap();
        assert_eq!(read_square(&p, 8).unwrap(), px);
    }
}
