//! Decoder fine-tuning: Dice + cross-entropy loss, Adam, optional reduced
//! precision with dynamic loss scaling, global-norm clipping, per-epoch
//! validation, plateau learning-rate decay and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{self, Confusion};
use crate::models::{sigmoid, Backend, Segmenter};
use crate::nn::{Adam, AdamConfig, Grads, ParamId, Precision};
use crate::patching::{tight_box, Patch};
use crate::{par, seeding, BinaryMask, BoundingBox, Error, Result};

pub const DEFAULT_DICE_EPSILON: f64 = 1e-6;
/// Probabilities are clamped to `[BCE_DELTA, 1 - BCE_DELTA]` before the log.
pub const BCE_DELTA: f64 = 1e-7;
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Saves weights, backend and patch resolution.
pub fn save_checkpoint(segmenter: &Segmenter, path: &Path) -> Result<()> {
    segmenter.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Segmenter> {
    Segmenter::load(path)
}

/// Loads a checkpoint, failing with a backend-mismatch error if it holds a
/// different backend.
pub fn load_checkpoint_as(path: &Path, backend: Backend) -> Result<Segmenter> {
    Segmenter::load_as(path, backend)
}

fn check_dims(probabilities: ArrayView2<f32>, gt: &BinaryMask) -> Result<()> {
    if probabilities.dim() != gt.dims() {
        return Err(Error::invalid(format!(
            "probabilities are {:?} but the mask is {:?}",
            probabilities.dim(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(probabilities: ArrayView2<f32>, gt: &BinaryMask, epsilon: f64) -> Result<f64> {
    check_dims(probabilities, gt)?;
    if !(epsilon > 0.0) {
        return Err(Error::argument("dice epsilon must be positive"));
    }
    let (inter, sum_p, sum_g) = dice_sums(probabilities, gt);
    Ok(1.0 - (2.0 * inter + epsilon) / (sum_p + sum_g + epsilon))
}

fn dice_sums(probabilities: ArrayView2<f32>, gt: &BinaryMask) -> (f64, f64, f64) {
    let mut sums = (0.0, 0.0, 0.0);
    Zip::from(probabilities)
        .and(gt.labels())
        .for_each(|&p, &g| {
            let (p, g) = (p as f64, g as f64);
            sums.0 += p * g;
            sums.1 += p;
            sums.2 += g;
        });
    sums
}

/// Mean binary cross-entropy on clamped probabilities.
pub fn bce_loss(probabilities: ArrayView2<f32>, gt: &BinaryMask) -> Result<f64> {
    check_dims(probabilities, gt)?;
    let mut total = 0.0;
    Zip::from(probabilities)
        .and(gt.labels())
        .for_each(|&p, &g| {
            let p = (p as f64).clamp(BCE_DELTA, 1.0 - BCE_DELTA);
            total -= if g == 1 { p.ln() } else { (1.0 - p).ln() };
        });
    Ok(total / probabilities.len() as f64)
}

/// Unweighted sum of [`dice_loss`] (with [`DEFAULT_DICE_EPSILON`]) and [`bce_loss`].
pub fn combined_loss(probabilities: ArrayView2<f32>, gt: &BinaryMask) -> Result<f64> {
    Ok(dice_loss(probabilities, gt, DEFAULT_DICE_EPSILON)? + bce_loss(probabilities, gt)?)
}

/// Combined loss and its gradient with respect to each probability.
pub fn combined_loss_grad(
    probabilities: ArrayView2<f32>,
    gt: &BinaryMask,
    epsilon: f64,
) -> Result<(f64, Array2<f64>)> {
    let loss = dice_loss(probabilities, gt, epsilon)? + bce_loss(probabilities, gt)?;
    let (inter, sum_p, sum_g) = dice_sums(probabilities, gt);
    let num = 2.0 * inter + epsilon;
    let den = sum_p + sum_g + epsilon;
    let n = probabilities.len() as f64;
    let mut grad = Array2::zeros(probabilities.dim());
    Zip::from(&mut grad)
        .and(probabilities)
        .and(gt.labels())
        .for_each(|d, &p, &g| {
            let (p, g) = (p as f64, g as f64);
            let dice = -(2.0 * g * den - num) / (den * den);
            let bce = if p > BCE_DELTA && p < 1.0 - BCE_DELTA {
                (-g / p + (1.0 - g) / (1.0 - p)) / n
            } else {
                0.0
            };
            *d = dice + bce;
        });
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 3,
            min_lr: 1e-8,
        }
    }
}

/// Decays the learning rate once validation loss has failed to improve for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

/// Relative margin a loss must beat the best by to count as an improvement.
const PLATEAU_THRESHOLD: f64 = 1e-4;

impl PlateauScheduler {
    pub fn new(initial_lr: f64, config: SchedulerConfig) -> Self {
        Self {
            config,
            lr: initial_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss and returns the rate for the next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - PLATEAU_THRESHOLD) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.config.patience {
            self.lr = (self.lr * self.config.factor)
                .max(self.config.min_lr)
                .min(self.lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// Dynamic loss scaling for reduced-precision backward passes.
#[derive(Debug, Clone)]
pub struct LossScaler {
    scale: f32,
    good_steps: u32,
}

impl LossScaler {
    pub const INITIAL_SCALE: f32 = 65536.0;
    pub const GROWTH_INTERVAL: u32 = 2000;

    pub fn new() -> Self {
        Self {
            scale: Self::INITIAL_SCALE,
            good_steps: 0,
        }
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Updates the scale after a step; `finite` says whether the unscaled
    /// gradients were usable.
    pub fn update(&mut self, finite: bool) {
        if finite {
            self.good_steps += 1;
            if self.good_steps == Self::GROWTH_INTERVAL {
                self.scale *= 2.0;
                self.good_steps = 0;
            }
        } else {
            self.scale = (self.scale * 0.5).max(f32::MIN_POSITIVE);
            self.good_steps = 0;
        }
    }
}

impl Default for LossScaler {
    fn default() -> Self {
        Self::new()
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grads.global_norm(ids);
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        grads.scale(coef as f32);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_max_norm: f64,
    pub scheduler: SchedulerConfig,
    pub mixed_precision: bool,
    pub seed: u64,
    pub dice_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 20,
            clip_max_norm: 1.0,
            scheduler: SchedulerConfig::default(),
            mixed_precision: false,
            seed: 0,
            dice_epsilon: DEFAULT_DICE_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.clip_max_norm > 0.0) {
            return bad("clip max norm must be positive");
        }
        let s = self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) {
            return bad("scheduler factor must lie in (0, 1)");
        }
        if !(s.min_lr >= 0.0) {
            return bad("scheduler min lr must be non-negative");
        }
        if !(self.dice_epsilon > 0.0) {
            return bad("dice epsilon must be positive");
        }
        Ok(())
    }
}

/// One training or validation example at patch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Array2<f32>,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
}

/// Turns resized patches with masks into samples prompted by a jittered
/// tight box; patches without a mask or foreground are skipped.
pub fn samples_from_patches(patches: &[Patch], jitter: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patches
        .iter()
        .filter_map(|p| {
            let mask = p.mask.as_ref()?;
            let bbox = tight_box(mask, jitter, &mut rng).ok()?;
            Some(TrainSample {
                image: p.image.clone(),
                mask: mask.clone(),
                bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Mean combined loss and pooled pixel metrics over `samples`.
pub fn validate(segmenter: &Segmenter, samples: &[TrainSample]) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let per_sample = par::try_map(samples, |s| -> Result<(f64, Confusion)> {
        let pred = segmenter.segment_patch(&s.image, &s.bbox)?;
        let loss = combined_loss(pred.probabilities.view(), &s.mask)?;
        Ok((loss, metrics::confusion(&pred.mask, &s.mask)?))
    })?;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / samples.len() as f64;
    let counts = per_sample
        .iter()
        .fold(Confusion::default(), |acc, (_, c)| acc + *c);
    let report = metrics::compute_metrics(counts)?;
    Ok(Validation {
        loss,
        iou: report.iou,
        precision: report.precision,
        recall: report.recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    /// Rate used for this epoch's updates.
    pub lr: f64,
    pub skipped_steps: usize,
    pub checkpoint_path: Option<PathBuf>,
}

/// Where to write logs and checkpoints; `None` fields are skipped.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// JSON Lines file one [`EpochLog`] is appended to per epoch.
    pub log_path: Option<PathBuf>,
    /// Holds `epoch_{k}/model.ckpt` and the `best` link.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainOutput {
    /// `dir/train_log.jsonl` and `dir/checkpoints/`.
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            log_path: Some(dir.join(TRAIN_LOG_FILE)),
            checkpoint_dir: Some(dir.join(CHECKPOINT_DIR)),
        }
    }
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(log)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(unix)]
fn point_best(link: &Path, target: &Path) -> std::io::Result<()> {
    match fs::remove_file(link) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
        _ => {}
    }
    std::os::unix::fs::symlink(target, link)
}

#[cfg(not(unix))]
fn point_best(link: &Path, target: &Path) -> std::io::Result<()> {
    let dir = link.parent().unwrap_or(Path::new("."));
    let _ = fs::remove_dir_all(link);
    fs::create_dir_all(link)?;
    fs::copy(
        dir.join(target).join(CHECKPOINT_FILE),
        link.join(CHECKPOINT_FILE),
    )
    .map(|_| ())
}

/// Loss and gradients of one sample; `dlogits` is pre-multiplied by `weight`.
fn sample_step(
    segmenter: &Segmenter,
    sample: &TrainSample,
    precision: Precision,
    epsilon: f64,
    weight: f64,
) -> Result<(f64, Grads)> {
    let (logits, tape) = segmenter.forward_tape(&sample.image, &sample.bbox, precision)?;
    let probabilities = logits.mapv(sigmoid);
    let (loss, dprob) = combined_loss_grad(probabilities.view(), &sample.mask, epsilon)?;
    let mut dlogits = Array2::zeros(logits.dim());
    Zip::from(&mut dlogits)
        .and(&dprob)
        .and(&probabilities)
        .for_each(|d, &g, &p| {
            let p = p as f64;
            *d = (g * p * (1.0 - p) * weight) as f32;
        });
    let dlogits = precision.applied(dlogits);
    Ok((loss, segmenter.backward(&tape, &dlogits, precision)))
}

/// Fine-tunes the trainable parameters of `segmenter`.
///
/// Every epoch shuffles `train_set` with a seed derived from the config,
/// runs mini-batches, validates on `val_set`, updates the learning rate and,
/// if an output directory is given, writes a checkpoint and a log line.
pub fn train(
    segmenter: &mut Segmenter,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    config: &TrainConfig,
    output: &TrainOutput,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let trainable = segmenter.trainable_parameters()?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be nonempty",
        ));
    }
    let precision = if config.mixed_precision {
        Precision::Half
    } else {
        Precision::Full
    };
    let store = segmenter.store().expect("learned backend");
    let mut adam = Adam::new(
        store,
        trainable.clone(),
        AdamConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut scheduler = PlateauScheduler::new(config.learning_rate, config.scheduler);
    let mut scaler = LossScaler::new();
    let mut best_val = f64::INFINITY;
    let checkpoints = output.checkpoint_dir.as_ref();
    if let Some(dir) = checkpoints {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(parent) = output.log_path.as_ref().and_then(|p| p.parent()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }

    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = scheduler.lr();
        adam.set_lr(lr);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeding::derive(
            config.seed,
            &[epoch as u64],
        )));

        let mut loss_sum = 0.0;
        let mut skipped = 0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = if config.mixed_precision {
                scaler.scale() as f64
            } else {
                1.0
            };
            let weight = scale / batch.len() as f64;
            let seg: &Segmenter = segmenter;
            let results = par::try_map(batch, |&i| {
                sample_step(seg, &train_set[i], precision, config.dice_epsilon, weight)
            })?;
            let mut grads: Option<Grads> = None;
            let mut batch_loss = 0.0;
            for (loss, g) in results {
                batch_loss += loss;
                match &mut grads {
                    Some(acc) => acc.merge(g),
                    None => grads = Some(g),
                }
            }
            let divergence = |scale: f32| Error::Divergence {
                epoch,
                batch: batch_idx,
                loss_scale: scale,
                loss: batch_loss / batch.len() as f64,
            };
            if !batch_loss.is_finite() {
                return Err(divergence(scale as f32));
            }
            let mut grads = grads.expect("nonempty batch");
            if config.mixed_precision {
                grads.scale((1.0 / scale) as f32);
            }
            let finite = grads.all_finite();
            if config.mixed_precision {
                scaler.update(finite);
                if !finite {
                    skipped += 1;
                    if scaler.scale() <= 1.0 {
                        return Err(divergence(scaler.scale()));
                    }
                    loss_sum += batch_loss;
                    continue;
                }
            } else if !finite {
                return Err(divergence(1.0));
            }
            clip_grad_norm(&mut grads, &trainable, config.clip_max_norm);
            adam.step(segmenter.store_mut().expect("learned backend"), &grads);
            loss_sum += batch_loss;
        }

        let val = validate(segmenter, val_set)?;
        scheduler.step(val.loss);
        let checkpoint_path = match checkpoints {
            Some(dir) => {
                let name = format!("epoch_{epoch}");
                let path = dir.join(&name).join(CHECKPOINT_FILE);
                segmenter.save(&path)?;
                if val.loss < best_val {
                    let link = dir.join("best");
                    point_best(&link, Path::new(&name)).map_err(|e| Error::io(&link, e))?;
                }
                Some(path)
            }
            None => None,
        };
        best_val = best_val.min(val.loss);
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_iou: val.iou,
            val_precision: val.precision,
            val_recall: val.recall,
            lr,
            skipped_steps: skipped,
            checkpoint_path,
        };
        if let Some(path) = &output.log_path {
            append_log(path, &log)?;
        }
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{PromptableConfig, UnetConfig};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(rows: Vec<Vec<u8>>) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(Array2::from_shape_vec((h, w), rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let g = mask(vec![vec![1, 1], vec![0, 0]]);
        let p = array![[1.0f32, 0.0], [0.0, 0.0]];
        assert!((dice_loss(p.view(), &g, 1e-6).unwrap() - (1.0 - 2.0 / 3.0)).abs() < 1e-6);
        assert!(dice_loss(g.to_f32().view(), &g, 1e-9).unwrap() < 1e-9);
        let zeros = BinaryMask::zeros(3, 3);
        let ones = Array2::<f32>::ones((3, 3));
        let l = dice_loss(ones.view(), &zeros, 1e-6).unwrap();
        assert!((l - (1.0 - 1e-6 / (9.0 + 1e-6))).abs() < 1e-12);
        assert!(dice_loss(ones.view(), &BinaryMask::zeros(2, 2), 1e-6).is_err());
    }

    #[test]
    fn bce_examples() {
        let g = mask(vec![vec![1]]);
        assert!(
            (bce_loss(array![[0.25f32]].view(), &g).unwrap() - 0.25f64.ln().abs()).abs() < 1e-6
        );
        let half = Array2::from_elem((4, 4), 0.5f32);
        let g = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        assert!((bce_loss(half.view(), &g).unwrap() - 2f64.ln()).abs() < 1e-7);
        let exact = bce_loss(g.to_f32().view(), &g).unwrap();
        assert!((exact - (-(1.0 - BCE_DELTA).ln())).abs() < 1e-12);
        assert!(bce_loss(half.view(), &BinaryMask::zeros(3, 4)).is_err());
    }

    #[test]
    fn combined_examples() {
        let g = BinaryMask::from_fn(4, 4, |r, c| r == c);
        assert!(combined_loss(g.to_f32().view(), &g).unwrap() < 1e-6);
        let d = 1.0 - 2.0 / 3.0;
        let b = 2f64.ln();
        assert!((d + b - 1.0264).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn loss_gradient_matches_finite_differences(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.05f32..0.95));
            let g = BinaryMask::new(Array2::from_shape_fn((8, 8), |_| u8::from(rng.random_bool(0.4)))).unwrap();
            let (_, grad) = combined_loss_grad(p.view(), &g, DEFAULT_DICE_EPSILON).unwrap();
            let h = 1e-3f32;
            for (r, c) in [(0, 0), (3, 5), (7, 7), (4, 1)] {
                let mut up = p.clone();
                up[[r, c]] += h;
                let mut down = p.clone();
                down[[r, c]] -= h;
                let step = (up[[r, c]] - down[[r, c]]) as f64;
                let fd = (combined_loss(up.view(), &g).unwrap() - combined_loss(down.view(), &g).unwrap()) / step;
                let an = grad[[r, c]];
                prop_assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }

        #[test]
        fn clipped_norm_never_exceeds_limit(scale in 0.0f32..100.0, max_norm in 0.01f64..10.0) {
            let mut store = crate::nn::ParamStore::new();
            let id = store.add_zeros("w", &[5], false);
            let mut grads = Grads::new(&store);
            grads.accumulate(id, ndarray::Array1::from_vec(vec![scale, -scale, 0.5 * scale, 1.0, -2.0]));
            clip_grad_norm(&mut grads, &[id], max_norm);
            prop_assert!(grads.global_norm(&[id]) <= max_norm + 1e-6);
        }

        #[test]
        fn scheduler_is_monotone_and_floored(losses in prop::collection::vec(0.0f64..2.0, 1..40), patience in 0usize..4) {
            let cfg = SchedulerConfig { factor: 0.5, patience, min_lr: 1e-4 };
            let mut s = PlateauScheduler::new(1e-2, cfg);
            let mut prev = s.lr();
            for l in losses {
                let lr = s.step(l);
                prop_assert!(lr <= prev && lr >= cfg.min_lr);
                prev = lr;
            }
        }
    }

    #[test]
    fn plateau_example() {
        let mut s = PlateauScheduler::new(1e-5, SchedulerConfig::default());
        let lrs: Vec<f64> = [1.0, 1.0, 1.0, 1.0].iter().map(|&l| s.step(l)).collect();
        assert_eq!(lrs[..3], [1e-5, 1e-5, 1e-5]);
        assert!((lrs[3] - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn loss_scaler_grows_and_backs_off() {
        let mut s = LossScaler::new();
        s.update(false);
        assert_eq!(s.scale(), 32768.0);
        for _ in 0..LossScaler::GROWTH_INTERVAL {
            s.update(true);
        }
        assert_eq!(s.scale(), 65536.0);
    }

    fn tiny_samples(n: usize, res: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r0 = rng.random_range(0..res / 2);
                let c0 = rng.random_range(0..res / 2);
                let m = BinaryMask::from_fn(res, res, |r, c| {
                    (r0..r0 + res / 3).contains(&r) && (c0..c0 + res / 3).contains(&c)
                });
                let image = m.to_f32().mapv(|v| 0.2 + 0.6 * v);
                let bbox = crate::patching::exact_box(&m).unwrap();
                TrainSample {
                    image,
                    mask: m,
                    bbox,
                }
            })
            .collect()
    }

    fn tiny_unet() -> Segmenter {
        Segmenter::unet(
            UnetConfig {
                depth: 1,
                base_width: 2,
            },
            8,
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_weights() {
        let data = tiny_samples(2, 8, 1);
        let mut seg = tiny_unet();
        let before = seg.weights_digest();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&mut seg, &data, &data, &cfg, &TrainOutput::default())
            .unwrap()
            .is_empty());
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 1,
            ..Default::default()
        };
        let logs = train(
            &mut seg,
            &data[..1],
            &data[..1],
            &cfg,
            &TrainOutput::default(),
        )
        .unwrap();
        assert_eq!(seg.weights_digest(), before);
        assert!(logs[0].train_loss > 0.0);
    }

    #[test]
    fn threshold_backend_cannot_train() {
        let data = tiny_samples(1, 8, 1);
        let mut seg = Segmenter::threshold(Default::default(), 8).unwrap();
        let err = train(
            &mut seg,
            &data,
            &data,
            &TrainConfig::default(),
            &TrainOutput::default(),
        );
        assert!(matches!(err, Err(Error::NoTrainableParameters(_))));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = tiny_samples(6, 8, 2);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let mut seg = tiny_unet();
            train(&mut seg, &data, &data, &cfg, &TrainOutput::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a[2].train_loss < a[0].train_loss);
    }

    #[test]
    fn foundation_training_keeps_encoders_fixed() {
        let data = tiny_samples(3, 8, 3);
        let mut seg = Segmenter::foundation(PromptableConfig { embed_dim: 8 }, 8, 1).unwrap();
        let frozen = seg.frozen_digest();
        let all = seg.weights_digest();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 2,
            ..Default::default()
        };
        train(&mut seg, &data, &data, &cfg, &TrainOutput::default()).unwrap();
        assert_eq!(seg.frozen_digest(), frozen);
        assert_ne!(seg.weights_digest(), all);
    }

    #[test]
    fn mixed_precision_trains_with_finite_losses() {
        let data = tiny_samples(4, 8, 4);
        let mut seg = tiny_unet();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 2,
            mixed_precision: true,
            ..Default::default()
        };
        let logs = train(&mut seg, &data, &data, &cfg, &TrainOutput::default()).unwrap();
        assert!(logs.iter().all(|l| l.train_loss.is_finite()));
    }

    #[test]
    fn checkpoints_and_log_reproduce_validation() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_samples(4, 8, 5);
        let mut seg = tiny_unet();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 2,
            ..Default::default()
        };
        let logs = train(
            &mut seg,
            &data,
            &data[..2],
            &cfg,
            &TrainOutput::in_dir(dir.path()),
        )
        .unwrap();
        assert_eq!(
            read_train_log(&dir.path().join(TRAIN_LOG_FILE)).unwrap(),
            logs
        );
        for log in &logs {
            let reloaded =
                load_checkpoint_as(log.checkpoint_path.as_ref().unwrap(), Backend::Unet).unwrap();
            let val = validate(&reloaded, &data[..2]).unwrap();
            assert_eq!((val.loss, val.iou), (log.val_loss, log.val_iou));
        }
        let best = dir
            .path()
            .join(CHECKPOINT_DIR)
            .join("best")
            .join(CHECKPOINT_FILE);
        assert!(load_checkpoint(&best).is_ok());
        assert!(matches!(
            load_checkpoint_as(&best, Backend::Foundation),
            Err(Error::BackendMismatch { .. })
        ));
    }
}
