//! Flat `key = value` configuration files and flag/file/default layering.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

/// Keys accepted in a configuration file; each names a long option.
pub const KNOWN_KEYS: &[&str] = &[
    "backend",
    "batch-size",
    "box-jitter",
    "cell-size",
    "checkpoint",
    "clip-max-norm",
    "embed-dim",
    "epochs",
    "foundation-checkpoint",
    "frames-per-modality",
    "height",
    "lr",
    "lr-factor",
    "manifest",
    "min-lr",
    "mixed-precision",
    "noise",
    "out",
    "patch-resolution",
    "patience",
    "proposal-backend",
    "proposal-checkpoint",
    "raw",
    "seed",
    "split",
    "split-seed",
    "unet-batch-size",
    "unet-checkpoint",
    "unet-depth",
    "unet-epochs",
    "unet-lr",
    "unet-width",
    "weight-decay",
    "width",
];

/// Error in user-supplied configuration; maps to the validation exit code.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, and `_` in keys is read as `-`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(invalid(format!("{origin}:{}: unknown key `{key}`", n + 1)));
            }
            let value = value.trim().trim_matches('"').to_string();
            if values.insert(key.clone(), value).is_some() {
                return Err(invalid(format!(
                    "{origin}:{}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| invalid(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }

    /// Flag value if given, else the file's, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    /// Flag value if given, else the file's, else `None`.
    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.parsed(key),
        }
    }

    /// Like [`ConfigFile::pick_opt`] but the value must come from somewhere.
    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.pick_opt(flag, key)?
            .ok_or_else(|| invalid(format!("--{key} is required (flag or config key)")))
    }
}
