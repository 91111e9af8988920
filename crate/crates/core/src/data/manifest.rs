use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phantom::PhantomSpec;
use super::{load_sample, Sample};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// path relative to the dataset root
    pub file: String,
    pub split: Split,
}

/// How the samples were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub kind: String,
    pub spec: PhantomSpec,
}

/// Index of a dataset directory, stored as `manifest.json` at its root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub generator: Option<GeneratorInfo>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                what: "manifest",
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for e in &m.samples {
            if !seen.insert(e.file.as_str()) {
                return Err(Error::Corrupt {
                    what: "manifest",
                    msg: format!("{}: `{}` is listed more than once", path.display(), e.file),
                });
            }
        }
        if m.num_classes < 2 || m.num_classes > 256 {
            return Err(Error::Corrupt {
                what: "manifest",
                msg: format!("{}: num_classes {} outside 2..=256", path.display(), m.num_classes),
            });
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(Error::io(path))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Io {
                path: root.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: Manifest::load(root)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Loads every sample of `split` in manifest order, checking extents,
    /// channel count and class indices against the manifest.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let m = &self.manifest;
        self.manifest
            .entries(split)
            .map(|e| {
                let path = self.root.join(&e.file);
                let s = load_sample(&path)?;
                if s.image.shape() != [m.channels, m.height, m.width] {
                    return Err(Error::Corrupt {
                        what: "sample",
                        msg: format!(
                            "{}: image {:?} does not match manifest [{}, {}, {}]",
                            path.display(),
                            s.image.shape(),
                            m.channels,
                            m.height,
                            m.width
                        ),
                    });
                }
                if let Some(&bad) = s.mask.iter().find(|&&c| c as usize >= m.num_classes) {
                    return Err(Error::Corrupt {
                        what: "sample",
                        msg: format!(
                            "{}: mask value {bad} not below num_classes {}",
                            path.display(),
                            m.num_classes
                        ),
                    });
                }
                Ok(s)
            })
            .collect()
    }

    /// Like [`Dataset::load_split`] but an empty split is an error.
    pub fn require_split(&self, split: Split) -> Result<Vec<Sample>> {
        let samples = self.load_split(split)?;
        if samples.is_empty() {
            return Err(Error::Empty(match split {
                Split::Train => "train split",
                Split::Val => "val split",
                Split::Test => "test split",
            }));
        }
        Ok(samples)
    }
}
