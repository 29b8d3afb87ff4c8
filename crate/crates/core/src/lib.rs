//! Segmentation toolkit for high-speed boiling video.
//!
//! The pipeline runs grayscale frames through reference subtraction and
//! contrast stretching, cuts them into a fixed grid of cells, resizes each
//! cell to the segmenter's patch resolution, predicts a mask per cell from a
//! box prompt and stitches the cell masks back into a full-frame mask.
//! Three segmenter backends share one interface: a promptable network with
//! frozen image/prompt encoders and a trainable mask decoder, a U-Net
//! baseline, and a parameter-free Otsu threshold oracle.
//!
//! Data-parallel loops (frames, cells, batch samples) run on rayon when the
//! `parallel` feature is enabled and fall back to plain iterators otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod datamodel;
pub mod error;
pub mod experiments;
pub mod imageio;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod par;
pub mod patching;
pub mod preprocess;
mod seeding;
pub mod synth;
pub mod training;

pub use datamodel::{
    AggregateStats, BinaryMask, BoundingBox, DatasetManifest, Frame, GridGeometry, ManifestEntry,
    MetricsReport, Modality, ModalityName, Split,
};
pub use error::{Error, Result};
pub use models::{Backend, PatchPrediction, Segmenter};
