//! Dataset manifest (JSON): sample root, feature sizes and split lists.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Directory holding one sub-directory per sample id; relative paths
    /// are resolved against the manifest's own directory.
    pub root: PathBuf,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.video_dim == 0 || self.audio_dim == 0 || self.num_classes == 0 {
            return Err(Error::Validation("manifest dimensions must be positive".into()));
        }
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(Error::Validation(format!("invalid sample id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("sample id {id:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Checks that every listed sample directory exists.
    pub fn check_resolvable(&self) -> Result<()> {
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !self.sample_dir(id).is_dir() {
                return Err(Error::Validation(format!(
                    "sample {id:?} not found under {}",
                    self.root.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    m.validate()?;
    Ok(m)
}

pub fn encode_manifest(m: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifests serialize");
    s.push('\n');
    s
}

/// Reads a manifest and resolves its root against the manifest location.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text)?;
    if m.root.is_relative() {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        m.root = base.join(&m.root);
    }
    Ok(m)
}
