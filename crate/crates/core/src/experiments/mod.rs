//! Dataset preparation, the three comparison experiments and report rendering.
//!
//! Output tree under an experiment's `out_dir`:
//!
//! ```text
//! checkpoints/<model>/...   training logs and per-epoch checkpoints
//! eval/<fluid slug>.csv     per-frame scores of every evaluated model
//! eval/comparison.csv       mean IoU and F1 per fluid and model
//! reports/                  results table and box plots
//! run.json                  run record
//! ```

mod prepare;
mod report;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{DatasetManifest, ModalityName, Split};
use crate::inference::{evaluate_manifest, FrameOptions, Prompting};
use crate::models::UnetConfig;
use crate::models::{checkpoint, load_segmenter, Backend, Segmenter, SegmenterOptions};
use crate::patching::{patchify, resize_patches, DEFAULT_BOX_JITTER, DEFAULT_CELL_SIZE};
use crate::seeding::derive;
use crate::training::{
    self, samples_from_patches, EpochLog, TrainConfig, TrainOutput, TrainSample,
};
use crate::{par, Error, Result};

pub use prepare::{prepare, scan_raw, Exclusion, Prepared, RawModality};
pub use report::{
    box_stats, fluid_csv_name, model_label, read_comparison_csv, read_model_frames, render_boxplot,
    render_table, report, write_comparison_csv, write_model_frames, BoxStats, ComparisonRow,
    ModelFrameRow, ReportOutputs, COMPARISON_FILE, EVAL_DIR, MODEL_BASE, MODEL_TUNED, MODEL_UNET,
    REPORTS_DIR, TABLE_FILE,
};

pub const MANIFESTS_DIR: &str = "manifests";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const RUN_RECORD_FILE: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Fine-tune on Argon only, evaluate on the other fluids.
    ZeroShot,
    /// Fine-tune on all fluids, evaluate on each.
    MultiModality,
    /// As `MultiModality`, plus a U-Net trained on the same data.
    UnetComparison,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 3] = [
        ExperimentKind::ZeroShot,
        ExperimentKind::MultiModality,
        ExperimentKind::UnetComparison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::ZeroShot => "zero_shot",
            ExperimentKind::MultiModality => "multi_modality",
            ExperimentKind::UnetComparison => "unet_comparison",
        }
    }

    pub fn models(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::UnetComparison => &[MODEL_UNET, MODEL_BASE, MODEL_TUNED],
            _ => &[MODEL_BASE, MODEL_TUNED],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::argument(format!("unknown experiment {s:?} (expected zero_shot, multi_modality or unet_comparison)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Path or registry identifier of the pretrained promptable checkpoint.
    pub foundation_checkpoint: String,
    /// Initial U-Net weights; seeded random weights when absent.
    pub unet_checkpoint: Option<String>,
    pub train: TrainConfig,
    pub unet_train: TrainConfig,
    pub unet: UnetConfig,
    pub cell_size: usize,
    pub box_jitter: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            foundation_checkpoint: checkpoint::DEFAULT_FOUNDATION_REF.to_string(),
            unet_checkpoint: None,
            train: TrainConfig::default(),
            unet_train: TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            unet: UnetConfig::default(),
            cell_size: DEFAULT_CELL_SIZE,
            box_jitter: DEFAULT_BOX_JITTER,
            seed: 0,
        }
    }

    fn model_seed(&self, model: &str) -> u64 {
        let tag = match model {
            MODEL_UNET => 1,
            MODEL_TUNED => 2,
            _ => 0,
        };
        derive(self.seed, &[tag])
    }
}

/// What an experiment will do, worked out from the manifest without
/// touching the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    pub train_modalities: Vec<ModalityName>,
    pub eval_modalities: Vec<ModalityName>,
    pub models: Vec<&'static str>,
    pub foundation_checkpoint: PathBuf,
    pub unet_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl fmt::Display for ExperimentPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names =
            |ms: &[ModalityName]| ms.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ");
        writeln!(f, "experiment {}", self.kind)?;
        writeln!(
            f,
            "  foundation checkpoint: {}",
            self.foundation_checkpoint.display()
        )?;
        if let Some(p) = &self.unet_checkpoint {
            writeln!(f, "  unet checkpoint: {}", p.display())?;
        }
        writeln!(f, "  train on: {}", names(&self.train_modalities))?;
        for model in &self.models {
            match *model {
                MODEL_BASE => writeln!(f, "  {}: no training", model_label(model))?,
                _ => writeln!(
                    f,
                    "  {}: train -> {}",
                    model_label(model),
                    self.out_dir.join(CHECKPOINTS_DIR).join(model).display()
                )?,
            }
        }
        writeln!(
            f,
            "  evaluate on test split of: {}",
            names(&self.eval_modalities)
        )?;
        writeln!(f, "  outputs: {}", self.out_dir.display())
    }
}

fn count(manifest: &DatasetManifest, split: Split, m: ModalityName) -> usize {
    manifest.select(split, Some(m)).len()
}

/// Validates the manifest and checkpoints for `kind` and returns the plan.
pub fn plan(kind: ExperimentKind, config: &ExperimentConfig) -> Result<ExperimentPlan> {
    let manifest = DatasetManifest::load(&config.manifest)?;
    plan_with(kind, config, &manifest)
}

fn plan_with(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
) -> Result<ExperimentPlan> {
    let report = manifest.validate();
    if !report.is_valid() {
        return Err(Error::invalid(format!(
            "manifest {} is invalid: {:?}",
            config.manifest.display(),
            report.violations
        )));
    }
    config.train.validate()?;
    if kind == ExperimentKind::UnetComparison {
        config.unet_train.validate()?;
    }
    let present = manifest.modalities();
    let train_modalities: Vec<ModalityName> = match kind {
        ExperimentKind::ZeroShot => vec![ModalityName::Argon],
        _ => present.iter().copied().collect(),
    };
    let trained_epochs = config
        .train
        .epochs
        .max(if kind == ExperimentKind::UnetComparison {
            config.unet_train.epochs
        } else {
            0
        });
    if trained_epochs > 0 {
        for &m in &train_modalities {
            if count(manifest, Split::Train, m) == 0 || count(manifest, Split::Val, m) == 0 {
                return Err(Error::Config(format!(
                    "{kind} needs {m} frames in both the train and val splits"
                )));
            }
        }
    }
    let eval_modalities: Vec<ModalityName> = present
        .iter()
        .copied()
        .filter(|&m| kind != ExperimentKind::ZeroShot || m != ModalityName::Argon)
        .filter(|&m| count(manifest, Split::Test, m) > 0)
        .collect();
    if eval_modalities.is_empty() {
        return Err(Error::Config(format!(
            "{kind} has no test frames to evaluate"
        )));
    }
    let missing = |reference: &str, backend: &str| {
        checkpoint::resolve_reference(reference).map_err(|e| {
            Error::Config(format!("missing checkpoint for the {backend} backend: {e}"))
        })
    };
    let foundation_checkpoint = missing(&config.foundation_checkpoint, "foundation")?;
    let unet_checkpoint = match (&config.unet_checkpoint, kind) {
        (Some(r), ExperimentKind::UnetComparison) => Some(missing(r, "unet")?),
        _ => None,
    };
    Ok(ExperimentPlan {
        kind,
        train_modalities,
        eval_modalities,
        models: kind.models().to_vec(),
        foundation_checkpoint,
        unet_checkpoint,
        out_dir: config.out_dir.clone(),
    })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked {
                path: dir.to_path_buf(),
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Samples from every frame of `modalities` in `split`: non-empty grid cells
/// resized to `resolution`, prompted by a jittered tight box.
pub fn collect_samples(
    manifest: &DatasetManifest,
    split: Split,
    modalities: &[ModalityName],
    cell_size: usize,
    resolution: usize,
    box_jitter: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let entries: Vec<_> = modalities
        .iter()
        .flat_map(|&m| manifest.select(split, Some(m)))
        .collect();
    let per_frame = par::try_map(&entries, |entry| -> Result<Vec<TrainSample>> {
        let (frame, mask) = crate::inference::load_entry(manifest, entry)?;
        let set = patchify(&frame, Some(&mask), cell_size, true)?;
        let patches = resize_patches(&set, resolution)?;
        let sample_seed = derive(
            seed,
            &[entry.modality as u64, split as u64, entry.index as u64],
        );
        Ok(samples_from_patches(&patches, box_jitter, sample_seed))
    })?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Training and digest summary of one model in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model: String,
    pub backend: Backend,
    /// Checkpoint the model started from; `None` for seeded initialisation.
    pub initial_checkpoint: Option<PathBuf>,
    pub initial_digest: String,
    /// Final weights written by the run.
    pub checkpoint: Option<PathBuf>,
    pub weights_digest: String,
    pub frozen_digest: String,
    pub init_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub epochs: Vec<EpochLog>,
}

/// Everything needed to re-execute a run and check its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub manifest_digest: String,
    pub train_modalities: Vec<ModalityName>,
    pub eval_modalities: Vec<ModalityName>,
    pub models: Vec<ModelRecord>,
    pub results: Vec<ComparisonRow>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn train_model(
    model: &str,
    segmenter: &mut Segmenter,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<(Vec<EpochLog>, PathBuf)> {
    let dir = out_dir.join(CHECKPOINTS_DIR).join(model);
    let logs = training::train(
        segmenter,
        train_set,
        val_set,
        config,
        &TrainOutput::in_dir(&dir),
    )?;
    let final_path = dir.join(training::CHECKPOINT_FILE);
    segmenter.save(&final_path)?;
    Ok((logs, final_path))
}

/// Runs `kind` end to end and writes the run record, evaluation CSVs and
/// report. Checkpoints are resolved before any training.
pub fn run_experiment(kind: ExperimentKind, config: &ExperimentConfig) -> Result<RunRecord> {
    let manifest = DatasetManifest::load(&config.manifest)?;
    let plan = plan_with(kind, config, &manifest)?;
    let base =
        Segmenter::load_as(&plan.foundation_checkpoint, Backend::Foundation).map_err(|e| {
            Error::Config(format!(
                "missing checkpoint for the foundation backend: {e}"
            ))
        })?;
    let resolution = base.patch_resolution();
    let unet_options = SegmenterOptions {
        patch_resolution: resolution,
        unet: config.unet,
        seed: config.model_seed(MODEL_UNET),
        ..SegmenterOptions::default()
    };
    let unet_start = if kind == ExperimentKind::UnetComparison {
        let reference = plan
            .unet_checkpoint
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned());
        let unet = load_segmenter(Backend::Unet, reference.as_deref(), &unet_options)
            .map_err(|e| Error::Config(format!("unet backend: {e}")))?;
        if unet.patch_resolution() != resolution {
            return Err(Error::Config(format!(
                "unet patch resolution {} differs from the foundation checkpoint's {resolution}",
                unet.patch_resolution()
            )));
        }
        Some(unet)
    } else {
        None
    };

    let _lock = OutputLock::acquire(&config.out_dir)?;
    let needs_data =
        config.train.epochs > 0 || unet_start.as_ref().is_some() && config.unet_train.epochs > 0;
    let (train_set, val_set) = if needs_data {
        let collect = |split| {
            collect_samples(
                &manifest,
                split,
                &plan.train_modalities,
                config.cell_size,
                resolution,
                config.box_jitter,
                config.seed,
            )
        };
        (collect(Split::Train)?, collect(Split::Val)?)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut models: Vec<(&str, Segmenter)> = Vec::new();
    let mut records = Vec::new();
    let base_digest = base.weights_digest();
    if let Some(mut unet) = unet_start {
        let initial_digest = unet.weights_digest();
        let train_cfg = TrainConfig {
            seed: config.model_seed(MODEL_UNET),
            ..config.unet_train
        };
        let (epochs, path) = train_model(
            MODEL_UNET,
            &mut unet,
            &train_set,
            &val_set,
            &train_cfg,
            &config.out_dir,
        )?;
        records.push(ModelRecord {
            model: MODEL_UNET.into(),
            backend: Backend::Unet,
            initial_checkpoint: plan.unet_checkpoint.clone(),
            initial_digest,
            checkpoint: Some(path),
            weights_digest: unet.weights_digest(),
            frozen_digest: unet.frozen_digest(),
            init_seed: plan.unet_checkpoint.is_none().then_some(unet_options.seed),
            train_seed: Some(train_cfg.seed),
            epochs,
        });
        models.push((MODEL_UNET, unet));
    }
    records.push(ModelRecord {
        model: MODEL_BASE.into(),
        backend: Backend::Foundation,
        initial_checkpoint: Some(plan.foundation_checkpoint.clone()),
        initial_digest: base_digest.clone(),
        checkpoint: Some(plan.foundation_checkpoint.clone()),
        weights_digest: base_digest.clone(),
        frozen_digest: base.frozen_digest(),
        init_seed: None,
        train_seed: None,
        epochs: Vec::new(),
    });
    let mut tuned = base.clone();
    models.push((MODEL_BASE, base));
    let train_cfg = TrainConfig {
        seed: config.model_seed(MODEL_TUNED),
        ..config.train
    };
    let (epochs, path) = train_model(
        MODEL_TUNED,
        &mut tuned,
        &train_set,
        &val_set,
        &train_cfg,
        &config.out_dir,
    )?;
    records.push(ModelRecord {
        model: MODEL_TUNED.into(),
        backend: Backend::Foundation,
        initial_checkpoint: Some(plan.foundation_checkpoint.clone()),
        initial_digest: base_digest,
        checkpoint: Some(path),
        weights_digest: tuned.weights_digest(),
        frozen_digest: tuned.frozen_digest(),
        init_seed: None,
        train_seed: Some(train_cfg.seed),
        epochs,
    });
    models.push((MODEL_TUNED, tuned));

    let eval_dir = config.out_dir.join(EVAL_DIR);
    let options = FrameOptions {
        cell_size: config.cell_size,
        prompting: Prompting::Grid,
    };
    let mut results = Vec::new();
    for &modality in &plan.eval_modalities {
        let mut frames = Vec::new();
        for (model, segmenter) in &models {
            let eval =
                evaluate_manifest(segmenter, &manifest, Split::Test, modality, &options, None)?;
            frames.extend(
                eval.rows
                    .iter()
                    .map(|(i, r)| ModelFrameRow::new(model, *i, r)),
            );
            results.push(ComparisonRow {
                fluid: modality.as_str().to_string(),
                model: model.to_string(),
                iou: eval.mean("iou").unwrap_or(0.0),
                f1: eval.mean("f1").unwrap_or(0.0),
            });
        }
        write_model_frames(&eval_dir.join(fluid_csv_name(modality.as_str())), &frames)?;
    }
    write_comparison_csv(&eval_dir.join(COMPARISON_FILE), &results)?;
    report(&config.out_dir)?;

    let record = RunRecord {
        experiment: kind,
        config: config.clone(),
        manifest_digest: sha256_hex(manifest.to_jsonl().as_bytes()),
        train_modalities: plan.train_modalities,
        eval_modalities: plan.eval_modalities,
        models: records,
        results,
    };
    let path = config.out_dir.join(RUN_RECORD_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

#[cfg(test)]
mod tests;
