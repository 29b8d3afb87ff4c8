//! Grayscale PNG/TIFF reading and writing.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use crate::preprocess::{binarize_mask, to_grayscale};
use crate::{BinaryMask, Error, Frame, Result};

/// Decoded image with raw sample values, laid out `(height, width, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub data: Array3<f32>,
    /// Full-scale sample value (255 for 8-bit, 65535 for 16-bit).
    pub max_value: f32,
}

impl RawImage {
    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, max_value, samples): (usize, f32, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => {
            (1, 255.0, b.into_raw().into_iter().map(f32::from).collect())
        }
        DynamicImage::ImageLumaA8(b) => {
            (2, 255.0, b.into_raw().into_iter().map(f32::from).collect())
        }
        DynamicImage::ImageRgb8(b) => (3, 255.0, b.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageRgba8(b) => {
            (4, 255.0, b.into_raw().into_iter().map(f32::from).collect())
        }
        DynamicImage::ImageLuma16(b) => (
            1,
            65535.0,
            b.into_raw().into_iter().map(f32::from).collect(),
        ),
        DynamicImage::ImageLumaA16(b) => (
            2,
            65535.0,
            b.into_raw().into_iter().map(f32::from).collect(),
        ),
        DynamicImage::ImageRgb16(b) => (
            3,
            65535.0,
            b.into_raw().into_iter().map(f32::from).collect(),
        ),
        DynamicImage::ImageRgba16(b) => (
            4,
            65535.0,
            b.into_raw().into_iter().map(f32::from).collect(),
        ),
        other => {
            let b = other.to_luma16();
            (
                1,
                65535.0,
                b.into_raw().into_iter().map(f32::from).collect(),
            )
        }
    };
    let data = Array3::from_shape_vec((h, w, channels), samples)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(RawImage { data, max_value })
}

/// Reads a frame, converting colour input to grayscale and scaling to `[0, 1]`.
pub fn read_frame(path: impl AsRef<Path>) -> Result<Frame> {
    to_grayscale(&read_raw(path)?)
}

/// Reads a mask image; any nonzero sample is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let raw = read_raw(path)?;
    let gray = raw.data.index_axis(ndarray::Axis(2), 0).to_owned();
    Ok(binarize_mask(&gray))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Writes intensities in `[0, 1]` as a 16-bit grayscale image.
pub fn write_gray16(path: impl AsRef<Path>, pixels: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let (h, w) = pixels.dim();
    let raw: Vec<u16> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn write_gray8(path: impl AsRef<Path>, pixels: &Array2<u8>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let (h, w) = pixels.dim();
    let raw: Vec<u8> = pixels.iter().copied().collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Writes a mask as an 8-bit image with values 0 and 255.
pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_gray8(path, &mask.labels().mapv(|v| v * 255))
}
