//! Seeded synthetic bubble frames with exact ground truth.
//!
//! Bubbles are filled, rotated ellipses at a foreground intensity over a
//! background with a slight illumination gradient; Gaussian sensor noise is
//! added afterwards and the result clipped to `[0, 1]`. The mask is the exact
//! union of ellipse interiors sampled at pixel centres, and the reference is
//! the noise-free empty background.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{assign_splits, DatasetManifest, ManifestEntry, ModalityName};
use crate::preprocess::ReferenceFrame;
use crate::{imageio, par, seeding, BinaryMask, Error, Frame, Result};

pub const MIN_FRAME_SIDE: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    GasLike,
    WaterLike,
}

impl PresetName {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::GasLike => "gas_like",
            PresetName::WaterLike => "water_like",
        }
    }

    pub fn preset(self) -> SynthPreset {
        match self {
            PresetName::GasLike => SynthPreset::gas_like(),
            PresetName::WaterLike => SynthPreset::water_like(),
        }
    }

    /// Preset used for a modality unless overridden.
    pub fn default_for(modality: ModalityName) -> Self {
        match modality {
            ModalityName::Water => PresetName::WaterLike,
            _ => PresetName::GasLike,
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gas_like" => Ok(PresetName::GasLike),
            "water_like" => Ok(PresetName::WaterLike),
            _ => Err(Error::argument(format!(
                "unknown preset `{s}` (expected gas_like or water_like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub name: PresetName,
    /// Inclusive bubble count range.
    pub bubble_count: (usize, usize),
    /// Semi-major axis range in pixels.
    pub radius: (f32, f32),
    /// Minor/major axis ratio range.
    pub ellipticity: (f32, f32),
    pub overlap_allowed: bool,
    pub noise_sigma: f32,
    pub foreground_intensity: f32,
    pub background_intensity: f32,
    /// Peak-to-peak background brightness change across the frame.
    pub illumination_gradient: f32,
}

impl SynthPreset {
    pub fn gas_like() -> Self {
        Self {
            name: PresetName::GasLike,
            bubble_count: (15, 40),
            radius: (4.0, 20.0),
            ellipticity: (0.5, 1.0),
            overlap_allowed: true,
            noise_sigma: 0.02,
            foreground_intensity: 0.75,
            background_intensity: 0.25,
            illumination_gradient: 0.05,
        }
    }

    pub fn water_like() -> Self {
        Self {
            name: PresetName::WaterLike,
            bubble_count: (1, 5),
            radius: (10.0, 40.0),
            ellipticity: (0.6, 1.0),
            overlap_allowed: false,
            noise_sigma: 0.08,
            foreground_intensity: 0.6,
            background_intensity: 0.4,
            illumination_gradient: 0.05,
        }
    }

    pub fn with_noise(mut self, sigma: f32) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{} preset: {m}", self.name)));
        if self.bubble_count.0 > self.bubble_count.1 {
            return bad("bubble count range is empty");
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must be positive and nonempty");
        }
        if !(self.ellipticity.0 > 0.0
            && self.ellipticity.0 <= self.ellipticity.1
            && self.ellipticity.1 <= 1.0)
        {
            return bad("ellipticity range must lie in (0, 1] and be nonempty");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        let levels = [self.foreground_intensity, self.background_intensity];
        if levels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("intensities must lie in [0, 1]");
        }
        if self.foreground_intensity == self.background_intensity {
            return bad("foreground and background intensities must differ");
        }
        if !(self.illumination_gradient >= 0.0) {
            return bad("illumination gradient must be non-negative");
        }
        Ok(())
    }
}

/// Filled ellipse; a pixel belongs to it when its centre lies inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub semi_major: f32,
    pub semi_minor: f32,
    pub angle: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_major;
        let v = (-dx * s + dy * c) / self.semi_minor;
        u * u + v * v <= 1.0
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.contains(col as f32 + 0.5, row as f32 + 0.5)
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub frame: Frame,
    pub mask: BinaryMask,
    pub reference: ReferenceFrame,
    pub bubbles: Vec<Ellipse>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_bubbles(
    rng: &mut ChaCha8Rng,
    preset: &SynthPreset,
    height: usize,
    width: usize,
) -> Vec<Ellipse> {
    let count = rng.random_range(preset.bubble_count.0..=preset.bubble_count.1);
    let mut bubbles: Vec<Ellipse> = Vec::with_capacity(count);
    const ATTEMPTS: usize = 100;
    for _ in 0..count {
        for _ in 0..ATTEMPTS {
            let semi_major = uniform(rng, preset.radius);
            let e = Ellipse {
                cx: rng.random_range(0.0..width as f32),
                cy: rng.random_range(0.0..height as f32),
                semi_major,
                semi_minor: semi_major * uniform(rng, preset.ellipticity),
                angle: rng.random_range(0.0..std::f32::consts::PI),
            };
            // Disjoint bounding circles, one pixel apart.
            let clear = preset.overlap_allowed
                || bubbles
                    .iter()
                    .all(|b| (b.cx - e.cx).hypot(b.cy - e.cy) > b.semi_major + e.semi_major + 1.0);
            if clear {
                bubbles.push(e);
                break;
            }
        }
    }
    bubbles
}

fn rasterize(bubbles: &[Ellipse], height: usize, width: usize) -> BinaryMask {
    let mut labels = Array2::<u8>::zeros((height, width));
    for b in bubbles {
        let r = b.semi_major.ceil() as isize + 1;
        let (cx, cy) = (b.cx.floor() as isize, b.cy.floor() as isize);
        let rows = (cy - r).max(0) as usize..((cy + r + 1).max(0) as usize).min(height);
        let cols = (cx - r).max(0) as usize..((cx + r + 1).max(0) as usize).min(width);
        for row in rows {
            for col in cols.clone() {
                if b.contains_pixel(row, col) {
                    labels[[row, col]] = 1;
                }
            }
        }
    }
    BinaryMask::new(labels).expect("binary labels")
}

/// Noise-free background: base level plus a diagonal linear ramp.
fn background(preset: &SynthPreset, height: usize, width: usize) -> Array2<f32> {
    let g = preset.illumination_gradient;
    Array2::from_shape_fn((height, width), |(r, c)| {
        let t = 0.5 * ((c as f32 + 0.5) / width as f32 + (r as f32 + 0.5) / height as f32) - 0.5;
        (preset.background_intensity + g * t).clamp(0.0, 1.0)
    })
}

/// Renders one frame; fully determined by `(seed, preset, height, width)`.
pub fn generate_frame(
    seed: u64,
    preset: &SynthPreset,
    height: usize,
    width: usize,
) -> Result<SynthFrame> {
    if height < MIN_FRAME_SIDE || width < MIN_FRAME_SIDE {
        return Err(Error::argument(format!(
            "synthetic frames must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {height}x{width}"
        )));
    }
    preset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bubbles = sample_bubbles(&mut rng, preset, height, width);
    let mask = rasterize(&bubbles, height, width);
    let bg = background(preset, height, width);
    let mut pixels = bg.clone();
    ndarray::Zip::from(&mut pixels)
        .and(mask.labels())
        .for_each(|p, &m| {
            if m == 1 {
                *p = preset.foreground_intensity;
            }
        });
    if preset.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, preset.noise_sigma).expect("finite sigma");
        pixels.mapv_inplace(|p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(SynthFrame {
        frame: Frame::new(pixels)?,
        mask,
        reference: ReferenceFrame::new(bg, None),
        bubbles,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub frames_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub presets: BTreeMap<ModalityName, SynthPreset>,
}

impl DatasetSpec {
    /// All four modalities with their default presets.
    pub fn new(seed: u64, frames_per_modality: usize, height: usize, width: usize) -> Self {
        let presets = ModalityName::ALL
            .into_iter()
            .map(|m| (m, PresetName::default_for(m).preset()))
            .collect();
        Self {
            seed,
            frames_per_modality,
            height,
            width,
            presets,
        }
    }

    /// Seed of frame `index` of `modality`.
    pub fn frame_seed(&self, modality: ModalityName, index: usize) -> u64 {
        let m = ModalityName::ALL
            .iter()
            .position(|&x| x == modality)
            .expect("known modality") as u64;
        seeding::derive(self.seed, &[m, index as u64])
    }

    fn split_seed(&self, modality: ModalityName) -> u64 {
        self.frame_seed(modality, usize::MAX)
    }
}

fn relative(modality: ModalityName, kind: &str, index: usize) -> PathBuf {
    PathBuf::from(modality.slug())
        .join(kind)
        .join(format!("{index:05}.png"))
}

/// Writes frames (16-bit PNG), masks (0/255 PNG) and one reference per
/// modality under `out_dir`, plus `manifest.jsonl` with relative paths.
pub fn generate_dataset(layout: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for (&modality, preset) in &layout.presets {
        preset.validate()?;
        let reference_rel = PathBuf::from(modality.slug()).join("reference.png");
        imageio::write_gray16(
            out_dir.join(&reference_rel),
            &background(preset, layout.height, layout.width),
        )?;
        par::try_map_range(layout.frames_per_modality, |i| -> Result<()> {
            let f = generate_frame(
                layout.frame_seed(modality, i),
                preset,
                layout.height,
                layout.width,
            )?;
            imageio::write_gray16(
                out_dir.join(relative(modality, "frames", i)),
                f.frame.pixels(),
            )?;
            imageio::write_mask(out_dir.join(relative(modality, "masks", i)), &f.mask)
        })?;
        let splits = assign_splits(layout.frames_per_modality, layout.split_seed(modality));
        entries.extend(
            splits
                .into_iter()
                .enumerate()
                .map(|(i, split)| ManifestEntry {
                    frame: relative(modality, "frames", i),
                    mask: relative(modality, "masks", i),
                    modality,
                    split,
                    index: i,
                    reference: Some(reference_rel.clone()),
                }),
        );
    }
    let mut manifest = DatasetManifest::new(entries, out_dir);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}
