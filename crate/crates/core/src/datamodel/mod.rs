//! Domain types shared across the pipeline.

mod manifest;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use manifest::{
    assign_splits, split_counts, validate_manifest, DatasetManifest, ManifestEntry, Split,
    ValidationReport, Violation,
};

/// Fluid of a high-speed video recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityName {
    Argon,
    Nitrogen,
    #[serde(rename = "FC-72")]
    FC72,
    Water,
}

impl ModalityName {
    pub const ALL: [ModalityName; 4] = [
        ModalityName::Argon,
        ModalityName::Nitrogen,
        ModalityName::FC72,
        ModalityName::Water,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityName::Argon => "Argon",
            ModalityName::Nitrogen => "Nitrogen",
            ModalityName::FC72 => "FC-72",
            ModalityName::Water => "Water",
        }
    }

    /// Lowercase identifier usable in file names.
    pub fn slug(self) -> &'static str {
        match self {
            ModalityName::Argon => "argon",
            ModalityName::Nitrogen => "nitrogen",
            ModalityName::FC72 => "fc72",
            ModalityName::Water => "water",
        }
    }

    /// Recording conditions of the modality.
    pub fn metadata(self) -> Modality {
        match self {
            ModalityName::Argon => {
                Modality::new(self, BoilingCondition::SaturatedPool, 120.0, None, 6000)
            }
            ModalityName::Nitrogen => {
                Modality::new(self, BoilingCondition::SaturatedPool, 120.0, None, 6000)
            }
            ModalityName::FC72 => {
                Modality::new(self, BoilingCondition::SaturatedPool, 170.0, None, 6000)
            }
            ModalityName::Water => {
                Modality::new(self, BoilingCondition::Flow, 3000.0, Some(500.0), 7500)
            }
        }
        .expect("built-in modality table is valid")
    }
}

impl fmt::Display for ModalityName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "argon" => Ok(ModalityName::Argon),
            "nitrogen" => Ok(ModalityName::Nitrogen),
            "fc72" => Ok(ModalityName::FC72),
            "water" => Ok(ModalityName::Water),
            _ => Err(Error::argument(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoilingCondition {
    /// Saturated pool boiling.
    #[serde(rename = "SPB")]
    SaturatedPool,
    /// Flow boiling with an imposed mass flux.
    #[serde(rename = "FB")]
    Flow,
}

/// Experimental conditions of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub name: ModalityName,
    pub condition: BoilingCondition,
    /// kW/m².
    pub heat_flux: f64,
    /// kg/(m²·s); present only for flow boiling.
    pub mass_flux: Option<f64>,
    pub frame_count: usize,
}

impl Modality {
    pub fn new(
        name: ModalityName,
        condition: BoilingCondition,
        heat_flux: f64,
        mass_flux: Option<f64>,
        frame_count: usize,
    ) -> Result<Self> {
        match (condition, mass_flux) {
            (BoilingCondition::Flow, None) => {
                return Err(Error::invalid("flow boiling requires a mass flux"))
            }
            (BoilingCondition::SaturatedPool, Some(_)) => {
                return Err(Error::invalid("pool boiling has no mass flux"))
            }
            _ => {}
        }
        if !(heat_flux > 0.0) {
            return Err(Error::invalid("heat flux must be positive"));
        }
        if frame_count == 0 {
            return Err(Error::invalid("frame count must be positive"));
        }
        Ok(Self {
            name,
            condition,
            heat_flux,
            mass_flux,
            frame_count,
        })
    }
}

/// A single grayscale frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array2<f32>,
    pub modality: Option<ModalityName>,
    pub frame_index: usize,
}

impl Frame {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("frame must be at least 1x1"));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "frame intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            modality: None,
            frame_index: 0,
        })
    }

    pub fn with_provenance(mut self, modality: Option<ModalityName>, frame_index: usize) -> Self {
        self.modality = modality;
        self.frame_index = frame_index;
        self
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Per-pixel phase label: 1 for vapor (bubble), 0 for liquid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    labels: Array2<u8>,
}

impl BinaryMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask labels must be 0 or 1"));
        }
        Ok(Self { labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::ones((height, width)),
        }
    }

    /// Builds a mask from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            labels: Array2::from_shape_fn((height, width), |(r, c)| f(r, c) as u8),
        }
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.labels[[row, col]] == 1
    }

    pub fn count_foreground(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&v| v == 0)
    }

    /// Labels as `0.0` / `1.0`.
    pub fn to_f32(&self) -> Array2<f32> {
        self.labels.mapv(f32::from)
    }
}

/// Axis-aligned box with half-open pixel intervals `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    /// Checks `0 <= x_min < x_max <= width` and likewise for rows.
    pub fn new(
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if x_min >= x_max || x_max > width || y_min >= y_max || y_max > height {
            return Err(Error::invalid(format!(
                "box ({x_min},{y_min},{x_max},{y_max}) invalid for {width}x{height}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// The whole `width` x `height` area.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y_min..self.y_max).contains(&row) && (self.x_min..self.x_max).contains(&col)
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_min < self.x_max
            && self.x_max <= width
            && self.y_min < self.y_max
            && self.y_max <= height
    }
}

/// Layout of a frame cut into square cells, padded on the bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub cell_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub original_height: usize,
    pub original_width: usize,
}

impl GridGeometry {
    pub fn new(original_height: usize, original_width: usize, cell_size: usize) -> Result<Self> {
        if cell_size == 0 {
            return Err(Error::argument("cell size must be at least 1"));
        }
        if original_height == 0 || original_width == 0 {
            return Err(Error::invalid("frame must be at least 1x1"));
        }
        let rows = original_height.div_ceil(cell_size);
        let cols = original_width.div_ceil(cell_size);
        Ok(Self {
            cell_size,
            rows,
            cols,
            padded_height: rows * cell_size,
            padded_width: cols * cell_size,
            original_height,
            original_width,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Cell box in padded-frame coordinates.
    pub fn cell_box(&self, row: usize, col: usize) -> BoundingBox {
        BoundingBox {
            x_min: col * self.cell_size,
            y_min: row * self.cell_size,
            x_max: (col + 1) * self.cell_size,
            y_max: (row + 1) * self.cell_size,
        }
    }
}

/// Pixel confusion counts plus the derived scores. `f1` and `dice` are the
/// same quantity for binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub specificity: f64,
    pub dice: f64,
}

impl MetricsReport {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Score by name; `None` for unknown names.
    pub fn score(&self, name: &str) -> Option<f64> {
        Some(match name {
            "iou" => self.iou,
            "f1" => self.f1,
            "dice" => self.dice,
            "precision" => self.precision,
            "recall" => self.recall,
            "accuracy" => self.accuracy,
            "specificity" => self.specificity,
            _ => return None,
        })
    }

    pub const SCORE_NAMES: [&'static str; 7] = [
        "iou",
        "f1",
        "precision",
        "recall",
        "accuracy",
        "specificity",
        "dice",
    ];
}

/// Distribution of one score over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
    pub n: usize,
}
