//! File helpers shared by the commands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpt_core::datagen::{read_corpus, CaptionRecord};
use cpt_core::embedding::{read_embeddings, write_embeddings, EmbeddingRecord};
use cpt_core::label_space::LabelManifest;
use cpt_core::LabelSpace;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn read_labels(path: &Path) -> Result<LabelSpace> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read label manifest {}", path.display()))?;
    let manifest = LabelManifest::from_json(&text).with_context(|| format!("invalid label manifest {}", path.display()))?;
    LabelSpace::from_manifest(&manifest).with_context(|| format!("invalid label manifest {}", path.display()))
}

pub fn write_labels(path: &Path, space: &LabelSpace) -> Result<()> {
    fs::write(path, space.to_manifest().to_json()? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_records(path: &Path, space: &LabelSpace) -> Result<Vec<CaptionRecord>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_corpus(BufReader::new(file), space).with_context(|| format!("in {}", path.display()))
}

pub fn read_cpte(path: &Path) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_embeddings(&mut BufReader::new(file)).with_context(|| format!("in {}", path.display()))
}

pub fn write_cpte(path: &Path, d: usize, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = create(path)?;
    write_embeddings(&mut w, d, records)?;
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Files directly inside `dir`, sorted by name.
pub fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.retain(|p| p.is_file());
    out.sort();
    Ok(out)
}

/// Splits `name=value`.
pub fn parse_kv(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_owned(), v.to_owned())),
        _ => bail!("expected NAME=VALUE, got `{s}`"),
    }
}

pub fn parse_kv_as<T>(s: &str) -> Result<(String, T)>
where
    T: std::str::FromStr,
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let (k, v) = parse_kv(s)?;
    let v = v.parse().with_context(|| format!("bad value in `{s}`"))?;
    Ok((k, v))
}

/// Optional JSON config file with one section per module.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub gen: Option<Value>,
    #[serde(default)]
    pub encoder: Option<Value>,
    #[serde(default)]
    pub train: Option<Value>,
}

pub fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// Overlays the keys of a config-file section on top of `base`.
pub fn merge<T: Serialize + DeserializeOwned>(base: &T, overlay: Option<&Value>, section: &str) -> Result<T> {
    let Some(overlay) = overlay else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let Value::Object(fields) = overlay else {
        bail!("config section `{section}` must be an object");
    };
    let mut value = serde_json::to_value(base)?;
    let Value::Object(target) = &mut value else {
        bail!("config section `{section}` does not map to an object");
    };
    for (k, v) in fields {
        if !target.contains_key(k) {
            bail!("unknown field `{k}` in config section `{section}`");
        }
        target.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value).with_context(|| format!("invalid config section `{section}`"))
}
