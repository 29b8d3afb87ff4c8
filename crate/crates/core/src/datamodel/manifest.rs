//! JSON Lines dataset manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModalityName;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::argument(format!("unknown split `{s}`"))),
        }
    }
}

/// One frame/mask pair. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub frame: PathBuf,
    pub mask: PathBuf,
    pub modality: ModalityName,
    pub split: Split,
    pub index: usize,
    /// Blank reference frame subtracted from `frame` before segmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    /// Parses JSON Lines text. Blank lines are skipped; errors carry the
    /// 1-based line number.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        let base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn select(&self, split: Split, modality: Option<ModalityName>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split && modality.is_none_or(|m| e.modality == m))
            .collect()
    }

    pub fn modalities(&self) -> BTreeSet<ModalityName> {
        self.entries.iter().map(|e| e.modality).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        validate_manifest(self)
    }
}

/// Train/val/test sizes for `n` frames: 10% (rounded) each for validation
/// and test, the rest for training.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let tenth = (n + 5) / 10;
    let val = tenth.min(n);
    let test = tenth.min(n - val);
    (n - val - test, val, test)
}

/// Split label for each of `n` frames, positions drawn by a seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let (train, val, _) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingFile {
        entry: usize,
        path: PathBuf,
    },
    Unreadable {
        entry: usize,
        path: PathBuf,
        detail: String,
    },
    DimensionMismatch {
        entry: usize,
        frame: (u32, u32),
        other: (u32, u32),
        what: &'static str,
    },
    DuplicateSplit {
        frame: PathBuf,
        splits: Vec<Split>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingFile { entry, path } => {
                write!(f, "entry {entry}: missing file {}", path.display())
            }
            Violation::Unreadable {
                entry,
                path,
                detail,
            } => {
                write!(f, "entry {entry}: cannot read {}: {detail}", path.display())
            }
            Violation::DimensionMismatch {
                entry,
                frame,
                other,
                what,
            } => write!(
                f,
                "entry {entry}: frame is {}x{} but {what} is {}x{}",
                frame.0, frame.1, other.0, other.1
            ),
            Violation::DuplicateSplit { frame, splits } => {
                let names: Vec<_> = splits.iter().map(|s| s.as_str()).collect();
                write!(
                    f,
                    "frame {} appears in splits {}",
                    frame.display(),
                    names.join(", ")
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every file exists, that masks and references match their
/// frame's dimensions, and that no frame is assigned to more than one split.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut violations = Vec::new();

    for (i, entry) in manifest.entries.iter().enumerate() {
        let dims = |path: &Path, violations: &mut Vec<Violation>| -> Option<(u32, u32)> {
            let resolved = manifest.resolve(path);
            if !resolved.is_file() {
                violations.push(Violation::MissingFile {
                    entry: i,
                    path: resolved,
                });
                return None;
            }
            match image::image_dimensions(&resolved) {
                // (height, width)
                Ok((w, h)) => Some((h, w)),
                Err(e) => {
                    violations.push(Violation::Unreadable {
                        entry: i,
                        path: resolved,
                        detail: e.to_string(),
                    });
                    None
                }
            }
        };
        let frame = dims(&entry.frame, &mut violations);
        let mask = dims(&entry.mask, &mut violations);
        let reference = entry
            .reference
            .as_ref()
            .and_then(|r| dims(r, &mut violations));
        if let Some(frame) = frame {
            for (other, what) in [(mask, "mask"), (reference, "reference")] {
                if let Some(other) = other.filter(|o| *o != frame) {
                    violations.push(Violation::DimensionMismatch {
                        entry: i,
                        frame,
                        other,
                        what,
                    });
                }
            }
        }
    }

    let mut splits: BTreeMap<PathBuf, BTreeSet<Split>> = BTreeMap::new();
    for entry in &manifest.entries {
        splits
            .entry(manifest.resolve(&entry.frame))
            .or_default()
            .insert(entry.split);
    }
    for (frame, set) in splits {
        if set.len() > 1 {
            violations.push(Violation::DuplicateSplit {
                frame,
                splits: set.into_iter().collect(),
            });
        }
    }

    ValidationReport { violations }
}
