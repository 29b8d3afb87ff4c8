//! Promptable segmenters behind one interface.
//!
//! Three backends share the same per-patch call: a box-promptable network
//! with frozen encoders and a trainable mask decoder, a U-Net baseline that
//! ignores the prompt, and a weight-free Otsu threshold.

pub mod checkpoint;
mod promptable;
mod threshold;
mod unet;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::{DEFAULT_FOUNDATION_REF, MODEL_DIR_ENV};
pub use promptable::{PromptableConfig, PromptableNet};
pub use threshold::{OtsuSplit, OtsuThreshold};
pub use unet::{UNet, UnetConfig};

use crate::datamodel::{BinaryMask, BoundingBox};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamStore, Precision};
use crate::par;
use crate::patching::DEFAULT_PATCH_RES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Foundation,
    Unet,
    Threshold,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Foundation, Backend::Unet, Backend::Threshold];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Foundation => "foundation",
            Backend::Unet => "unet",
            Backend::Threshold => "threshold",
        }
    }

    pub fn is_learned(self) -> bool {
        self != Backend::Threshold
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backend::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::argument(format!(
                    "unknown backend {s:?} (expected foundation, unet or threshold)"
                ))
            })
    }
}

/// Settings used when a segmenter is built rather than read from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmenterOptions {
    pub patch_resolution: usize,
    pub unet: UnetConfig,
    pub foundation: PromptableConfig,
    pub threshold: OtsuThreshold,
    pub seed: u64,
}

impl Default for SegmenterOptions {
    fn default() -> Self {
        Self {
            patch_resolution: DEFAULT_PATCH_RES,
            unet: UnetConfig::default(),
            foundation: PromptableConfig::default(),
            threshold: OtsuThreshold::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Network {
    Foundation(PromptableNet),
    Unet(UNet),
    Threshold(OtsuThreshold),
}

/// Per-patch output. `mask` is `probabilities > 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub logits: Array2<f32>,
    pub probabilities: Array2<f32>,
    pub mask: BinaryMask,
}

impl PatchPrediction {
    pub fn from_logits(logits: Array2<f32>) -> Self {
        let probabilities = logits.mapv(sigmoid);
        let mask =
            BinaryMask::new(probabilities.mapv(|p| u8::from(p > 0.5))).expect("labels are binary");
        Self {
            logits,
            probabilities,
            mask,
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward-pass record needed for backpropagation.
pub(crate) enum Tape {
    Foundation(promptable::PromptTape),
    Unet(unet::UnetTape),
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub(crate) network: Network,
    pub(crate) patch_resolution: usize,
}

/// Builds or loads a segmenter.
///
/// The foundation backend needs a checkpoint reference (a file path or a
/// registry identifier); the U-Net falls back to seeded random weights; the
/// threshold backend refuses any reference.
pub fn load_segmenter(
    backend: Backend,
    checkpoint: Option<&str>,
    options: &SegmenterOptions,
) -> Result<Segmenter> {
    match (backend, checkpoint) {
        (Backend::Threshold, Some(r)) => Err(Error::argument(format!(
            "the threshold backend takes no checkpoint, got {r:?}"
        ))),
        (Backend::Threshold, None) => {
            Segmenter::threshold(options.threshold, options.patch_resolution)
        }
        (Backend::Unet, None) => {
            Segmenter::unet(options.unet, options.patch_resolution, options.seed)
        }
        (Backend::Foundation, None) => Err(Error::Load {
            what: "foundation checkpoint".into(),
            detail: format!(
                "a checkpoint reference is required (default registry id {DEFAULT_FOUNDATION_REF})"
            ),
        }),
        (_, Some(reference)) => {
            Segmenter::load_as(&checkpoint::resolve_reference(reference)?, backend)
        }
    }
}

impl Segmenter {
    pub fn threshold(rule: OtsuThreshold, patch_resolution: usize) -> Result<Self> {
        if patch_resolution == 0 || rule.bins < 2 {
            return Err(Error::Config(
                "threshold backend needs a positive resolution and at least 2 bins".into(),
            ));
        }
        Ok(Self {
            network: Network::Threshold(rule),
            patch_resolution,
        })
    }

    pub fn unet(config: UnetConfig, patch_resolution: usize, seed: u64) -> Result<Self> {
        config.validate(patch_resolution)?;
        Ok(Self {
            network: Network::Unet(UNet::new(config, seed)),
            patch_resolution,
        })
    }

    /// Randomly initialised promptable network. Used to produce stand-in
    /// foundation checkpoints; real use loads pretrained weights.
    pub fn foundation(
        config: PromptableConfig,
        patch_resolution: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate(patch_resolution)?;
        Ok(Self {
            network: Network::Foundation(PromptableNet::new(config, seed)),
            patch_resolution,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }

    /// Loads a checkpoint and checks it holds the `expected` backend.
    pub fn load_as(path: &Path, expected: Backend) -> Result<Self> {
        let s = checkpoint::load(path)?;
        if s.backend() != expected {
            return Err(Error::BackendMismatch {
                expected: expected.to_string(),
                found: s.backend().to_string(),
            });
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn backend(&self) -> Backend {
        match self.network {
            Network::Foundation(_) => Backend::Foundation,
            Network::Unet(_) => Backend::Unet,
            Network::Threshold(_) => Backend::Threshold,
        }
    }

    pub fn patch_resolution(&self) -> usize {
        self.patch_resolution
    }

    pub fn store(&self) -> Option<&ParamStore> {
        match &self.network {
            Network::Foundation(n) => Some(&n.store),
            Network::Unet(n) => Some(&n.store),
            Network::Threshold(_) => None,
        }
    }

    pub(crate) fn store_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.network {
            Network::Foundation(n) => Some(&mut n.store),
            Network::Unet(n) => Some(&mut n.store),
            Network::Threshold(_) => None,
        }
    }

    /// The parameters an optimizer may update.
    pub fn trainable_parameters(&self) -> Result<Vec<ParamId>> {
        let store = self
            .store()
            .ok_or_else(|| Error::NoTrainableParameters(self.backend().to_string()))?;
        let ids = store.trainable_ids();
        if ids.is_empty() {
            return Err(Error::NoTrainableParameters(self.backend().to_string()));
        }
        Ok(ids)
    }

    pub fn frozen_parameters(&self) -> Vec<ParamId> {
        self.store().map(ParamStore::frozen_ids).unwrap_or_default()
    }

    /// SHA-256 of the frozen parameters; constant under training.
    pub fn frozen_digest(&self) -> String {
        self.store()
            .map(|s| s.digest(&s.frozen_ids()))
            .unwrap_or_else(|| ParamStore::new().digest(&[]))
    }

    /// SHA-256 of every parameter.
    pub fn weights_digest(&self) -> String {
        self.store()
            .map(ParamStore::digest_all)
            .unwrap_or_else(|| ParamStore::new().digest(&[]))
    }

    /// Checks the trainable/frozen partition expected of this backend.
    pub(crate) fn verify_partition(&self) -> Result<()> {
        let Some(store) = self.store() else {
            return Ok(());
        };
        for (_, p) in store.iter() {
            let should_freeze = match self.backend() {
                Backend::Foundation => !p.name.starts_with("mask_decoder."),
                _ => false,
            };
            if p.frozen != should_freeze {
                return Err(Error::invalid(format!(
                    "parameter {} must be {}",
                    p.name,
                    if should_freeze { "frozen" } else { "trainable" }
                )));
            }
        }
        Ok(())
    }

    fn check_patch(&self, image: &Array2<f32>, bbox: &BoundingBox) -> Result<()> {
        let r = self.patch_resolution;
        if image.dim() != (r, r) {
            return Err(Error::invalid(format!(
                "patch is {}x{}, segmenter expects {r}x{r}",
                image.nrows(),
                image.ncols()
            )));
        }
        if !bbox.fits(r, r) {
            return Err(Error::invalid(format!(
                "box {bbox:?} exceeds the {r}x{r} patch"
            )));
        }
        Ok(())
    }

    pub fn logits(
        &self,
        image: &Array2<f32>,
        bbox: &BoundingBox,
        precision: Precision,
    ) -> Result<Array2<f32>> {
        self.check_patch(image, bbox)?;
        Ok(match &self.network {
            Network::Foundation(n) => n.forward(image, bbox, precision),
            Network::Unet(n) => n.forward(image, precision),
            Network::Threshold(t) => t.logits(image),
        })
    }

    pub fn segment_patch(
        &self,
        image: &Array2<f32>,
        bbox: &BoundingBox,
    ) -> Result<PatchPrediction> {
        self.logits(image, bbox, Precision::Full)
            .map(PatchPrediction::from_logits)
    }

    /// Segments many patches at once; identical to calling
    /// [`Segmenter::segment_patch`] on each in turn.
    pub fn segment_patches(
        &self,
        patches: &[(Array2<f32>, BoundingBox)],
    ) -> Result<Vec<PatchPrediction>> {
        par::try_map(patches, |(image, bbox)| self.segment_patch(image, bbox))
    }

    pub(crate) fn forward_tape(
        &self,
        image: &Array2<f32>,
        bbox: &BoundingBox,
        precision: Precision,
    ) -> Result<(Array2<f32>, Tape)> {
        self.check_patch(image, bbox)?;
        match &self.network {
            Network::Foundation(n) => {
                let (l, t) = n.forward_tape(image, bbox, precision);
                Ok((l, Tape::Foundation(t)))
            }
            Network::Unet(n) => {
                let (l, t) = n.forward_tape(image, precision);
                Ok((l, Tape::Unet(t)))
            }
            Network::Threshold(_) => Err(Error::NoTrainableParameters(self.backend().to_string())),
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape,
        dlogits: &Array2<f32>,
        precision: Precision,
    ) -> Grads {
        match (&self.network, tape) {
            (Network::Foundation(n), Tape::Foundation(t)) => n.backward(t, dlogits, precision),
            (Network::Unet(n), Tape::Unet(t)) => n.backward(t, dlogits, precision),
            _ => unreachable!("tape recorded by a different backend"),
        }
    }
}
