//! Raw recording directory to preprocessed dataset with a split manifest.
//!
//! Expected input layout, one directory per fluid (named after it, e.g.
//! `argon/` or `FC-72/`):
//!
//! ```text
//! <raw>/<fluid>/frames/<name>.{png,tif,tiff}
//! <raw>/<fluid>/masks/<name>.{png,tif,tiff}
//! <raw>/<fluid>/reference.{png,tif,tiff}     (optional)
//! ```
//!
//! Frames and masks pair up by file stem. Prepared frames are written next to
//! the manifest as 16-bit PNGs under `frames/<slug>/` and masks as 0/255 PNGs
//! under `masks/<slug>/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datamodel::{assign_splits, DatasetManifest, ManifestEntry, ModalityName};
use crate::imageio;
use crate::preprocess::{preprocess_frame, ReferenceFrame};
use crate::seeding::derive;
use crate::{par, Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// A raw frame left out of the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub excluded: Vec<Exclusion>,
}

/// Frame/mask pairs found for one fluid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModality {
    pub modality: ModalityName,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub reference: Option<PathBuf>,
    pub excluded: Vec<Exclusion>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Lists fluids under `raw_dir` in [`ModalityName`] order.
pub fn scan_raw(raw_dir: &Path) -> Result<Vec<RawModality>> {
    if !raw_dir.is_dir() {
        return Err(Error::MissingInput {
            name: "raw data directory".into(),
            path: raw_dir.to_path_buf(),
        });
    }
    let mut found: BTreeMap<ModalityName, RawModality> = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(raw_dir)
        .map_err(|e| Error::io(raw_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let Some(modality) = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<ModalityName>().ok())
        else {
            continue;
        };
        if found.contains_key(&modality) {
            return Err(Error::invalid(format!(
                "more than one directory for {modality} in {}",
                raw_dir.display()
            )));
        }
        let frames = images_by_stem(&dir.join("frames"))?;
        let masks = images_by_stem(&dir.join("masks"))?;
        let mut pairs = Vec::new();
        let mut excluded = Vec::new();
        for (stem, frame) in frames {
            match masks.get(&stem) {
                Some(mask) => pairs.push((frame, mask.clone())),
                None => excluded.push(Exclusion {
                    path: frame,
                    reason: "no matching mask".into(),
                }),
            }
        }
        let reference = IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("reference.{ext}")))
            .find(|p| p.is_file());
        found.insert(
            modality,
            RawModality {
                modality,
                pairs,
                reference,
                excluded,
            },
        );
    }
    if found.is_empty() {
        return Err(Error::invalid(format!(
            "no fluid directories found in {}",
            raw_dir.display()
        )));
    }
    Ok(found.into_values().collect())
}

/// Preprocesses every paired frame, writes images and the manifest, and
/// assigns 80/10/10 splits per fluid from `split_seed`.
pub fn prepare(raw_dir: &Path, manifest_out: &Path, split_seed: u64) -> Result<Prepared> {
    let raw = scan_raw(raw_dir)?;
    let out_dir = manifest_out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for group in raw {
        excluded.extend(group.excluded.iter().cloned());
        let reference = group
            .reference
            .as_ref()
            .map(|p| {
                imageio::read_frame(p)
                    .map(|f| ReferenceFrame::new(f.into_pixels(), Some(group.modality)))
            })
            .transpose()?;
        let loaded = par::map(&group.pairs, |(frame_path, mask_path)| -> Result<_> {
            let frame = imageio::read_frame(frame_path)?;
            let mask = imageio::read_mask(mask_path)?;
            if mask.dims() != frame.dims() {
                return Err(Error::invalid(format!(
                    "mask is {:?} but frame is {:?}",
                    mask.dims(),
                    frame.dims()
                )));
            }
            Ok((preprocess_frame(&frame, reference.as_ref())?, mask))
        });
        let mut kept = Vec::new();
        for ((frame_path, _), result) in group.pairs.iter().zip(loaded) {
            match result {
                Ok(pair) => kept.push(pair),
                Err(e) => excluded.push(Exclusion {
                    path: frame_path.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        let slug = group.modality.slug();
        let splits = assign_splits(kept.len(), derive(split_seed, &[group.modality as u64]));
        let written = par::try_map_range(kept.len(), |index| -> Result<ManifestEntry> {
            let (frame, mask) = &kept[index];
            let frame_rel = PathBuf::from("frames")
                .join(slug)
                .join(format!("{index:05}.png"));
            let mask_rel = PathBuf::from("masks")
                .join(slug)
                .join(format!("{index:05}.png"));
            imageio::write_gray16(out_dir.join(&frame_rel), frame.pixels())?;
            imageio::write_mask(out_dir.join(&mask_rel), mask)?;
            Ok(ManifestEntry {
                frame: frame_rel,
                mask: mask_rel,
                modality: group.modality,
                split: splits[index],
                index,
                reference: None,
            })
        })?;
        entries.extend(written);
    }
    let manifest = DatasetManifest::new(entries, out_dir);
    manifest.save(manifest_out)?;
    Ok(Prepared {
        manifest,
        manifest_path: manifest_out.to_path_buf(),
        excluded,
    })
}
