//! Run manifests: what was run, with which configuration and on which bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::files::{sha256_file, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration after merging defaults, config file and flags.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "cpt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<Self> {
        for p in paths {
            self.inputs.push(FileDigest::of(p)?);
        }
        Ok(self)
    }

    pub fn outputs<'a>(mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<Self> {
        for p in paths {
            self.outputs.push(FileDigest::of(p)?);
        }
        Ok(self)
    }

    /// Writes next to `output`: `<dir>/run_manifest.json` for a directory,
    /// `<file>.manifest.json` otherwise.
    pub fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let path = manifest_path(output);
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run_manifest.json")
    } else {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}
