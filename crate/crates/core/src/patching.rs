//! Grid patchification, patch resizing, prompt boxes and mask stitching.
//!
//! Frames are zero-padded on the bottom/right to a multiple of the cell size,
//! cut into non-overlapping cells in row-major order, and each cell is resized
//! to the segmenter's patch resolution (bilinear for images, nearest for
//! masks). Stitching resizes predicted cell masks back to the cell size and
//! crops the padding away. For patch resolutions at least as large as the cell
//! size, `stitch(resize(patchify(mask)))` reproduces the mask exactly.

use std::collections::HashSet;

use ndarray::{s, Array2};
use rand::Rng;

use crate::{par, BinaryMask, BoundingBox, Error, Frame, GridGeometry, Result};

pub const DEFAULT_CELL_SIZE: usize = 100;
pub const DEFAULT_PATCH_RES: usize = 256;
pub const DEFAULT_BOX_JITTER: usize = 5;

/// One grid cell of a frame, optionally with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Array2<f32>,
    pub mask: Option<BinaryMask>,
    pub row: usize,
    pub col: usize,
}

impl Patch {
    pub fn resolution(&self) -> usize {
        self.image.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub geometry: GridGeometry,
}

/// Zero-pads the frame to the smallest multiple of `cell_size` in each dimension.
pub fn pad_to_grid(frame: &Frame, cell_size: usize) -> Result<(Frame, GridGeometry)> {
    let geometry = GridGeometry::new(frame.height(), frame.width(), cell_size)?;
    let padded = pad(frame.pixels(), &geometry);
    let frame = Frame::new(padded)?.with_provenance(frame.modality, frame.frame_index);
    Ok((frame, geometry))
}

fn pad<T: Copy + Default>(src: &Array2<T>, geometry: &GridGeometry) -> Array2<T> {
    let mut out = Array2::from_elem(
        (geometry.padded_height, geometry.padded_width),
        T::default(),
    );
    out.slice_mut(s![..geometry.original_height, ..geometry.original_width])
        .assign(src);
    out
}

/// Cuts the padded frame (and mask) into cells in row-major order.
///
/// With `drop_empty`, cells whose mask has no foreground are skipped; this
/// needs a mask.
pub fn patchify(
    frame: &Frame,
    mask: Option<&BinaryMask>,
    cell_size: usize,
    drop_empty: bool,
) -> Result<PatchSet> {
    if drop_empty && mask.is_none() {
        return Err(Error::argument("drop_empty requires a mask"));
    }
    if let Some(m) = mask {
        if m.dims() != frame.dims() {
            return Err(Error::invalid(format!(
                "mask is {:?} but frame is {:?}",
                m.dims(),
                frame.dims()
            )));
        }
    }
    let (padded, geometry) = pad_to_grid(frame, cell_size)?;
    let padded_mask = mask.map(|m| pad(m.labels(), &geometry));
    let c = cell_size;
    let mut patches = Vec::with_capacity(geometry.cell_count());
    for row in 0..geometry.rows {
        for col in 0..geometry.cols {
            let window = s![row * c..(row + 1) * c, col * c..(col + 1) * c];
            let cell_mask = padded_mask.as_ref().map(|m| {
                BinaryMask::new(m.slice(window).to_owned()).expect("mask labels stay binary")
            });
            if drop_empty && cell_mask.as_ref().is_some_and(BinaryMask::is_empty) {
                continue;
            }
            patches.push(Patch {
                image: padded.pixels().slice(window).to_owned(),
                mask: cell_mask,
                row,
                col,
            });
        }
    }
    Ok(PatchSet { patches, geometry })
}

/// Source index of destination index `dst_index` under floor mapping.
#[inline]
pub fn floor_index(dst_index: usize, src_len: usize, dst_len: usize) -> usize {
    dst_index * src_len / dst_len
}

/// Index into a `patch_len`-sized row that represents cell pixel `cell_index`
/// when shrinking a predicted patch back to `cell_len`.
///
/// Picks the patch pixel containing the cell pixel's centre, restricted to the
/// pixels that floor-map back onto `cell_index`, so that
/// floor-upsampling followed by this downsampling is the identity.
#[inline]
pub fn stitch_index(cell_index: usize, patch_len: usize, cell_len: usize) -> usize {
    if patch_len < cell_len {
        return floor_index(cell_index, patch_len, cell_len);
    }
    let centre = (2 * cell_index + 1) * patch_len / (2 * cell_len);
    let first = (cell_index * patch_len).div_ceil(cell_len);
    let last = ((cell_index + 1) * patch_len).div_ceil(cell_len) - 1;
    centre.clamp(first, last)
}

/// Nearest-neighbour resize of a mask with floor index mapping.
pub fn resize_mask_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (sh, sw) = mask.dims();
    let labels = mask.labels();
    let out = Array2::from_shape_fn((height, width), |(r, c)| {
        labels[[floor_index(r, sh, height), floor_index(c, sw, width)]]
    });
    BinaryMask::new(out).expect("labels stay binary")
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = image.dim();
    if (sh, sw) == (height, width) {
        return image.clone();
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let scale = src_len as f64 / dst_len as f64;
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..height).map(|r| taps(r, sh, height)).collect();
    let cols: Vec<_> = (0..width).map(|c| taps(c, sw, width)).collect();
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, ty) = rows[r];
        let (c0, c1, tx) = cols[c];
        let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
        let top = lerp(image[[r0, c0]], image[[r0, c1]], tx);
        let bottom = lerp(image[[r1, c0]], image[[r1, c1]], tx);
        lerp(top, bottom, ty)
    })
}

/// Resizes a square patch to `target` x `target`.
pub fn resize_patch(patch: &Patch, target: usize) -> Result<Patch> {
    let (h, w) = patch.image.dim();
    if h != w {
        return Err(Error::invalid(format!("patch is {h}x{w}, expected square")));
    }
    if target == 0 {
        return Err(Error::argument("target resolution must be positive"));
    }
    Ok(Patch {
        image: resize_bilinear(&patch.image, target, target),
        mask: patch
            .mask
            .as_ref()
            .map(|m| resize_mask_nearest(m, target, target)),
        row: patch.row,
        col: patch.col,
    })
}

/// Resizes every patch of a set, in parallel when enabled.
pub fn resize_patches(set: &PatchSet, target: usize) -> Result<Vec<Patch>> {
    par::try_map(&set.patches, |p| resize_patch(p, target))
}

/// One full-cell box per grid cell, row-major, in padded-frame coordinates.
pub fn grid_boxes(geometry: &GridGeometry) -> Vec<BoundingBox> {
    (0..geometry.rows)
        .flat_map(|r| (0..geometry.cols).map(move |c| (r, c)))
        .map(|(r, c)| geometry.cell_box(r, c))
        .collect()
}

/// Minimal box around the foreground, each side pushed outward by an
/// independent uniform draw from `0..=jitter` and clipped to the mask.
pub fn tight_box<R: Rng + ?Sized>(
    mask: &BinaryMask,
    jitter: usize,
    rng: &mut R,
) -> Result<BoundingBox> {
    let exact = exact_box(mask)?;
    if jitter == 0 {
        return Ok(exact);
    }
    let (h, w) = mask.dims();
    let mut grow = || rng.random_range(0..=jitter);
    let x_min = exact.x_min.saturating_sub(grow());
    let y_min = exact.y_min.saturating_sub(grow());
    let x_max = (exact.x_max + grow()).min(w);
    let y_max = (exact.y_max + grow()).min(h);
    BoundingBox::new(x_min, y_min, x_max, y_max, w, h)
}

/// Tight box without jitter.
pub fn exact_box(mask: &BinaryMask) -> Result<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in mask.labels().indexed_iter() {
        if v == 1 {
            bounds = Some(match bounds {
                None => (c, r, c, r),
                Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
            });
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyMask)?;
    let (h, w) = mask.dims();
    BoundingBox::new(x0, y0, x1 + 1, y1 + 1, w, h)
}

/// Places predicted cell masks back into a full-frame mask.
///
/// Each mask is resized to the cell size, missing cells stay zero and the
/// result is cropped to the original frame size.
pub fn stitch(
    patch_masks: &[(BinaryMask, usize, usize)],
    geometry: &GridGeometry,
) -> Result<BinaryMask> {
    let mut seen = HashSet::new();
    for (mask, row, col) in patch_masks {
        if *row >= geometry.rows || *col >= geometry.cols {
            return Err(Error::invalid(format!(
                "cell ({row},{col}) outside {}x{} grid",
                geometry.rows, geometry.cols
            )));
        }
        if mask.height() != mask.width() || mask.height() == 0 {
            return Err(Error::invalid(format!(
                "patch mask {:?} is not square",
                mask.dims()
            )));
        }
        if !seen.insert((*row, *col)) {
            return Err(Error::invalid(format!("cell ({row},{col}) given twice")));
        }
    }
    let c = geometry.cell_size;
    let cells = par::map(patch_masks, |(mask, _, _)| {
        let n = mask.height();
        let idx: Vec<usize> = (0..c).map(|i| stitch_index(i, n, c)).collect();
        let labels = mask.labels();
        Array2::from_shape_fn((c, c), |(r, col)| labels[[idx[r], idx[col]]])
    });
    let mut out = Array2::<u8>::zeros((geometry.padded_height, geometry.padded_width));
    for ((_, row, col), cell) in patch_masks.iter().zip(cells) {
        out.slice_mut(s![row * c..(row + 1) * c, col * c..(col + 1) * c])
            .assign(&cell);
    }
    let cropped = out
        .slice(s![..geometry.original_height, ..geometry.original_width])
        .to_owned();
    BinaryMask::new(cropped)
}
