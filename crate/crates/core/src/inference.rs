//! Frame and sequence segmentation by grid patches, plus evaluation.

use std::path::{Path, PathBuf};

use crate::datamodel::{DatasetManifest, ManifestEntry, ModalityName, Split};
use crate::metrics::{self, FrameMetricsRow};
use crate::models::{Backend, Segmenter};
use crate::patching::{exact_box, patchify, resize_patch, stitch, DEFAULT_CELL_SIZE};
use crate::preprocess::{preprocess_frame, ReferenceFrame};
use crate::{
    imageio, par, AggregateStats, BinaryMask, BoundingBox, Error, Frame, MetricsReport, Result,
};

/// How each grid cell is prompted.
#[derive(Debug, Clone, Copy, Default)]
pub enum Prompting<'a> {
    /// The full cell box.
    #[default]
    Grid,
    /// A first segmenter proposes a mask per cell; its tight box prompts the
    /// main segmenter. Cells with an empty proposal stay background.
    Proposal(&'a Segmenter),
}

#[derive(Debug, Clone, Copy)]
pub struct FrameOptions<'a> {
    pub cell_size: usize,
    pub prompting: Prompting<'a>,
}

impl Default for FrameOptions<'_> {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            prompting: Prompting::Grid,
        }
    }
}

/// Segments a preprocessed frame with grid-box prompts and default cells.
pub fn segment_frame(segmenter: &Segmenter, frame: &Frame) -> Result<BinaryMask> {
    segment_frame_with(segmenter, frame, &FrameOptions::default())
}

pub fn segment_frame_with(
    segmenter: &Segmenter,
    frame: &Frame,
    options: &FrameOptions<'_>,
) -> Result<BinaryMask> {
    let res = segmenter.patch_resolution();
    let set = patchify(frame, None, options.cell_size, false)?;
    let full = BoundingBox::full(res, res);
    let cells = par::try_map(&set.patches, |p| -> Result<(BinaryMask, usize, usize)> {
        let patch = resize_patch(p, res)?;
        let mask = match options.prompting {
            Prompting::Grid => segmenter.segment_patch(&patch.image, &full)?.mask,
            Prompting::Proposal(proposer) => {
                if proposer.patch_resolution() != res {
                    return Err(Error::argument(format!(
                        "proposal segmenter works at {} but the main segmenter at {res}",
                        proposer.patch_resolution()
                    )));
                }
                let proposal = proposer.segment_patch(&patch.image, &full)?.mask;
                match exact_box(&proposal) {
                    Ok(bbox) => segmenter.segment_patch(&patch.image, &bbox)?.mask,
                    Err(Error::EmptyMask) => BinaryMask::zeros(res, res),
                    Err(e) => return Err(e),
                }
            }
        };
        Ok((mask, p.row, p.col))
    })?;
    stitch(&cells, &set.geometry)
}

pub fn evaluate_frame(
    segmenter: &Segmenter,
    frame: &Frame,
    gt: &BinaryMask,
) -> Result<MetricsReport> {
    evaluate_frame_with(segmenter, frame, gt, &FrameOptions::default())
}

pub fn evaluate_frame_with(
    segmenter: &Segmenter,
    frame: &Frame,
    gt: &BinaryMask,
    options: &FrameOptions<'_>,
) -> Result<MetricsReport> {
    if frame.dims() != gt.dims() {
        return Err(Error::invalid(format!(
            "frame is {:?} but ground truth is {:?}",
            frame.dims(),
            gt.dims()
        )));
    }
    metrics::evaluate_masks(&segment_frame_with(segmenter, frame, options)?, gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub masks: Vec<BinaryMask>,
    /// Empty unless ground truth was supplied.
    pub reports: Vec<MetricsReport>,
    /// One entry per score name; empty unless ground truth was supplied.
    pub aggregates: Vec<AggregateStats>,
}

/// Segments frames independently; with ground truth, also scores each frame
/// and aggregates the scores.
pub fn segment_sequence(
    segmenter: &Segmenter,
    frames: &[Frame],
    gts: Option<&[BinaryMask]>,
    options: &FrameOptions<'_>,
) -> Result<SequenceResult> {
    if let Some(g) = gts {
        if g.len() != frames.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} ground-truth masks",
                frames.len(),
                g.len()
            )));
        }
    }
    let masks = par::try_map(frames, |f| segment_frame_with(segmenter, f, options))?;
    let (reports, aggregates) = match gts {
        Some(g) if !frames.is_empty() => {
            let reports = masks
                .iter()
                .zip(g)
                .map(|(m, gt)| metrics::evaluate_masks(m, gt))
                .collect::<Result<Vec<_>>>()?;
            let aggregates = metrics::aggregate_all(&reports)?;
            (reports, aggregates)
        }
        _ => (Vec::new(), Vec::new()),
    };
    Ok(SequenceResult {
        masks,
        reports,
        aggregates,
    })
}

/// Reads, converts and reference-subtracts a manifest frame, and reads its mask.
pub fn load_entry(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
) -> Result<(Frame, BinaryMask)> {
    let raw = imageio::read_frame(manifest.resolve(&entry.frame))?;
    let raw = raw.with_provenance(Some(entry.modality), entry.index);
    let reference = entry
        .reference
        .as_ref()
        .map(|r| {
            imageio::read_frame(manifest.resolve(r))
                .map(|f| ReferenceFrame::new(f.into_pixels(), Some(entry.modality)))
        })
        .transpose()?;
    let frame = preprocess_frame(&raw, reference.as_ref())?;
    let mask = imageio::read_mask(manifest.resolve(&entry.mask))?;
    if mask.dims() != frame.dims() {
        return Err(Error::invalid(format!(
            "{}: mask is {:?} but frame is {:?}",
            entry.mask.display(),
            mask.dims(),
            frame.dims()
        )));
    }
    Ok((frame, mask))
}

/// Result of evaluating one modality of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub modality: ModalityName,
    pub rows: Vec<(usize, MetricsReport)>,
    pub aggregates: Vec<AggregateStats>,
    /// Scores of the confusion counts summed over all frames.
    pub pooled: MetricsReport,
}

impl Evaluation {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.metric == metric)
            .map(|a| a.mean)
    }
}

/// Segments and scores every frame of `modality` in `split`. With
/// `mask_dir`, predicted masks are written there as `<index>.png`.
pub fn evaluate_manifest(
    segmenter: &Segmenter,
    manifest: &DatasetManifest,
    split: Split,
    modality: ModalityName,
    options: &FrameOptions<'_>,
    mask_dir: Option<&Path>,
) -> Result<Evaluation> {
    let entries = manifest.select(split, Some(modality));
    if entries.is_empty() {
        return Err(Error::invalid(format!("no {split} frames for {modality}")));
    }
    let rows = par::try_map(&entries, |entry| -> Result<(usize, MetricsReport)> {
        let (frame, gt) = load_entry(manifest, entry)?;
        let pred = segment_frame_with(segmenter, &frame, options)?;
        if let Some(dir) = mask_dir {
            imageio::write_mask(dir.join(format!("{:05}.png", entry.index)), &pred)?;
        }
        Ok((entry.index, metrics::evaluate_masks(&pred, &gt)?))
    })?;
    let reports: Vec<_> = rows.iter().map(|(_, r)| *r).collect();
    Ok(Evaluation {
        modality,
        aggregates: metrics::aggregate_all(&reports)?,
        pooled: metrics::pooled(&reports)?,
        rows,
    })
}

/// Paths written by [`write_evaluation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationFiles {
    pub frames: PathBuf,
    pub aggregate: PathBuf,
    pub pooled: PathBuf,
}

/// Writes `<stem>_frames.csv`, `<stem>_aggregate.csv` and `<stem>_pooled.csv`
/// into `dir`.
pub fn write_evaluation(eval: &Evaluation, dir: &Path, stem: &str) -> Result<EvaluationFiles> {
    let files = EvaluationFiles {
        frames: dir.join(format!("{stem}_frames.csv")),
        aggregate: dir.join(format!("{stem}_aggregate.csv")),
        pooled: dir.join(format!("{stem}_pooled.csv")),
    };
    metrics::write_frame_csv(&files.frames, &eval.rows)?;
    metrics::write_aggregate_csv(&files.aggregate, &eval.aggregates)?;
    let mut w = csv::Writer::from_path(&files.pooled)?;
    w.serialize(eval.pooled)?;
    w.flush().map_err(|e| Error::io(&files.pooled, e))?;
    Ok(files)
}

/// Reads a per-frame CSV back into reports.
pub fn read_evaluation_rows(path: &Path) -> Result<Vec<FrameMetricsRow>> {
    metrics::read_frame_csv(path)
}

/// Whether the two-stage mode applies to this main backend.
pub fn supports_proposals(backend: Backend) -> bool {
    backend == Backend::Foundation
}
