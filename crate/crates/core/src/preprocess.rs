//! Frame and mask normalization: grayscale conversion, blank-reference
//! subtraction with contrast stretching, and mask binarization.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::imageio::RawImage;
use crate::{BinaryMask, Error, Frame, ModalityName, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Background-only frame of a modality, subtracted from every frame of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub pixels: Array2<f32>,
    pub modality: Option<ModalityName>,
}

impl ReferenceFrame {
    pub fn new(pixels: Array2<f32>, modality: Option<ModalityName>) -> Self {
        Self { pixels, modality }
    }

    pub fn from_frame(frame: Frame) -> Self {
        let modality = frame.modality;
        Self {
            pixels: frame.into_pixels(),
            modality,
        }
    }
}

/// Converts a 1- or 3-channel image to a `[0, 1]` grayscale frame.
pub fn to_grayscale(image: &RawImage) -> Result<Frame> {
    let (h, w, c) = image.data.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("image has zero extent"));
    }
    if !(image.max_value > 0.0) {
        return Err(Error::invalid("image full-scale value must be positive"));
    }
    let scale = 1.0 / image.max_value;
    let gray = match c {
        1 => image.data.index_axis(Axis(2), 0).mapv(|v| v * scale),
        3 => Array2::from_shape_fn((h, w), |(r, col)| {
            let px = image.data.slice(ndarray::s![r, col, ..]);
            (LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]) * scale
        }),
        other => {
            return Err(Error::invalid(format!(
                "unsupported channel count {other}; expected 1 or 3"
            )))
        }
    };
    Frame::new(gray.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Subtracts the reference, clips negatives to zero and min-max stretches the
/// difference to `[0, 1]`. A constant difference image maps to all zeros.
pub fn subtract_reference(frame: &Frame, reference: &ReferenceFrame) -> Result<Frame> {
    if frame.dims() != reference.pixels.dim() {
        return Err(Error::invalid(format!(
            "frame is {:?} but reference is {:?}",
            frame.dims(),
            reference.pixels.dim()
        )));
    }
    let mut diff = Array2::<f32>::zeros(frame.dims());
    Zip::from(&mut diff)
        .and(frame.pixels())
        .and(&reference.pixels)
        .for_each(|d, &f, &r| *d = (f - r).max(0.0));
    let stretched = contrast_stretch(diff.view());
    Ok(Frame::new(stretched)?.with_provenance(frame.modality, frame.frame_index))
}

/// Reference subtraction when a reference is given, otherwise a plain
/// contrast stretch.
pub fn preprocess_frame(frame: &Frame, reference: Option<&ReferenceFrame>) -> Result<Frame> {
    match reference {
        Some(r) => subtract_reference(frame, r),
        None => Ok(Frame::new(contrast_stretch(frame.pixels().view()))?
            .with_provenance(frame.modality, frame.frame_index)),
    }
}

/// Global min-max stretch; constant input maps to zeros.
pub fn contrast_stretch(pixels: ArrayView2<f32>) -> Array2<f32> {
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Array2::zeros(pixels.dim());
    }
    let range = hi - lo;
    pixels.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Maps every strictly positive sample to 1 and everything else to 0.
pub fn binarize_mask<T>(raw: &Array2<T>) -> BinaryMask
where
    T: Copy + PartialOrd + Default,
{
    let zero = T::default();
    BinaryMask::new(raw.mapv(|v| u8::from(v > zero))).expect("labels are 0/1")
}
