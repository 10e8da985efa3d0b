//! On-disk artifacts shared between subcommands. Everything lives in one directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use ssrec_core::bihmm::ModelBundle;
use ssrec_core::domain::Dataset;
use ssrec_core::expansion::CooccurrenceStats;

pub const DATASET: &str = "dataset.json";
pub const VOCAB: &str = "vocab.json";
pub const PROFILES: &str = "profiles.json";
pub const MODELS: &str = "models.json";
pub const EXPANSION: &str = "expansion.json";
pub const INDEX: &str = "index.bin";

#[derive(Debug, Clone)]
pub struct Bundle {
    dir: PathBuf,
}

impl Bundle {
    pub fn open(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating bundle directory {}", dir.display()))?;
        Ok(Self::open(dir))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let path = self.path(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| ssrec_core::Error::io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(ssrec_core::Error::from)
            .with_context(|| format!("reading {}", path.display()))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.read_json(DATASET)
    }

    pub fn models(&self) -> Result<Option<ModelBundle>> {
        self.optional(MODELS)
    }

    pub fn expansion(&self) -> Result<Option<CooccurrenceStats>> {
        self.optional(EXPANSION)
    }

    fn optional<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        if self.has(name) {
            self.read_json(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// SHA-256 over the named files, each framed by its name and length.
    pub fn digest(&self, names: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for name in names {
            let path = self.path(name);
            let bytes = fs::read(&path).map_err(|e| ssrec_core::Error::io(&path, e))?;
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
