//! Image and depth raster files.
//!
//! RGB frames are 8-bit PNG, thermal frames 16-bit grayscale PNG whose full
//! range maps linearly onto the frame's recorded temperature range, and depth
//! maps a little-endian float32 raster behind a 16-byte header.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::imaging::Image;

pub const DEPTH_MAGIC: &[u8; 8] = b"XMDEPTH1";

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::InvalidInput(format!("rgb png needs 3 channels, got {}", image.channels)));
    }
    let buf: Vec<u8> = image.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, buf).expect("buffer sized from image");
    img.save(path)?;
    Ok(())
}

/// Grayscale 16-bit PNG from values in `[0, 1]`.
pub fn write_gray16_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 1 {
        return Err(Error::InvalidInput(format!("16-bit png needs 1 channel, got {}", image.channels)));
    }
    let buf: Vec<u16> = image.data.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, buf).expect("buffer sized from image");
    img.save(path)?;
    Ok(())
}

/// Reads any PNG as a float image in `[0, 1]`: 16-bit grayscale stays one
/// channel, 8-bit grayscale too, everything else becomes RGB.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            Image::new(w, h, 1, data)
        }
        image::DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::new(w, h, 1, data)
        }
        other => {
            let data = other.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::new(w, h, 3, data)
        }
    }
}

/// Linear min/max normalization of a temperature field into `[0, 1]`.
/// Returns the normalized image and the `[min, max]` range.
pub fn normalize_temperature(width: usize, height: usize, temps: &[f64]) -> (Image, [f64; 2]) {
    let lo = temps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = temps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = temps.iter().map(|&t| if span > 0.0 { (t - lo) / span } else { 0.0 }).collect();
    (Image { width, height, channels: 1, data }, [lo, hi])
}

pub fn denormalize_temperature(image: &Image, range: [f64; 2]) -> Vec<f64> {
    image.data.iter().map(|&v| range[0] + v * (range[1] - range[0])).collect()
}

/// Non-finite or non-positive depths mark invalid pixels and are stored as 0.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * depth.data.len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(depth.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for &d in &depth.data {
        let v = if d.is_finite() && d > 0.0 { d as f32 } else { 0.0 };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidInput(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(bad("not a depth raster"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * width * height {
        return Err(bad("truncated depth raster"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DepthMap::new(width, height, data)
}

/// Valid pixels: finite, positive depth.
pub fn depth_mask(depth: &DepthMap) -> Vec<bool> {
    depth.data.iter().map(|&d| d.is_finite() && d > 0.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_is_quantized_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::new(2, 1, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        write_rgb_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn thermal_roundtrip_recovers_temperatures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let temps = vec![20.0, 25.0, 30.0, 42.5];
        let (img, range) = normalize_temperature(2, 2, &temps);
        assert_eq!(range, [20.0, 42.5]);
        write_gray16_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.channels, 1);
        let t = denormalize_temperature(&back, range);
        for (a, b) in temps.iter().zip(&t) {
            assert!((a - b).abs() <= 22.5 / 65535.0);
        }
    }

    #[test]
    fn depth_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.depth");
        let depth = DepthMap::new(3, 2, vec![1.0, 2.5, f64::NAN, 0.0, 7.25, 1e3]).unwrap();
        write_depth(&path, &depth).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        let back = read_depth(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.data, vec![1.0, 2.5, 0.0, 0.0, 7.25, 1e3]);
        assert_eq!(depth_mask(&back), vec![true, true, false, false, true, true]);
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(read_depth(&path).is_err());
    }
}
