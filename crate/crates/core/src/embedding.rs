//! Frozen-encoder boundary.
//!
//! [`SyntheticEncoder`] stands in for pre-trained text and media encoders:
//! every label owns one anchor direction per modality, built from a vector
//! shared across modalities plus a small modality-specific perturbation. An
//! embedding is the normalized mean of its labels' anchors plus isotropic
//! Gaussian noise. The CPTE format carries embeddings from any encoder.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::CaptionRecord;
use crate::error::{CptError, Result};
use crate::io::{expect_eof, read_f32s, read_header, read_u32, read_u64, write_f32s, write_header};
use crate::label_space::{LabelSpace, ModalityId};
use crate::matrix::{normalize_in_place, Matrix};
use crate::rng::{fnv1a, keyed_rng, tag};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CPTE";
pub const EMBEDDING_VERSION: u32 = 1;
/// Stored vectors must have unit norm within this tolerance.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub ref_id: u64,
    pub modality: ModalityId,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn to_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticEncoderConfig {
    pub anchor_seed: u64,
    /// Per-coordinate std of the modality-specific anchor perturbation,
    /// relative to a unit-scale shared vector.
    pub delta_sigma: f64,
    /// Per-coordinate caption noise std, keyed by modality name.
    pub noise_sigma: BTreeMap<String, f64>,
    /// Per-coordinate test-item noise std, keyed by modality name.
    pub test_noise_sigma: BTreeMap<String, f64>,
    pub d: usize,
}

impl Default for SyntheticEncoderConfig {
    fn default() -> Self {
        Self {
            anchor_seed: 0,
            delta_sigma: 0.05,
            noise_sigma: BTreeMap::new(),
            test_noise_sigma: BTreeMap::new(),
            d: 512,
        }
    }
}

impl SyntheticEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(CptError::InvalidConfig(format!(
                "embedding dimension must be >= 2, got {}",
                self.d
            )));
        }
        let sigmas = self.noise_sigma.values().chain(self.test_noise_sigma.values());
        if !(self.delta_sigma >= 0.0 && self.delta_sigma.is_finite()) {
            return Err(CptError::InvalidConfig(format!(
                "delta_sigma must be finite and >= 0, got {}",
                self.delta_sigma
            )));
        }
        for &s in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(CptError::InvalidConfig(format!(
                    "noise sigma must be finite and >= 0, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Which noise table an encoding draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSource {
    Caption,
    TestItem,
    /// Class-name prompt text: caption noise level, separate stream.
    ClassPrompt,
}

/// Per-modality anchor matrices (N x d, unit rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    per_modality: Vec<Matrix>,
}

impl Anchors {
    pub fn for_modality(&self, m: ModalityId) -> Result<&Matrix> {
        self.per_modality
            .get(m.index())
            .ok_or_else(|| CptError::UnknownModality(m.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.per_modality.first().map_or(0, Matrix::cols)
    }
}

/// Label identity used to key anchor streams: owner modality name and label
/// name, so anchors survive index shifts caused by extension.
fn label_key(space: &LabelSpace, global: usize) -> u64 {
    let (owner, name) = space.label(global).expect("global index in range");
    let owner_name = space.modality_name(owner).expect("owner registered");
    fnv1a(format!("{owner_name}\u{1f}{name}").as_bytes())
}

pub fn make_anchors(space: &LabelSpace, cfg: &SyntheticEncoderConfig) -> Result<Anchors> {
    cfg.validate()?;
    let d = cfg.d;
    let scale = 1.0 / (d as f64).sqrt();
    let shared: Vec<Vec<f64>> = (0..space.len())
        .map(|c| {
            let mut rng = keyed_rng(&[tag::ANCHOR_SHARED, cfg.anchor_seed, label_key(space, c)]);
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut per_modality = Vec::with_capacity(space.modality_count());
    for m in space.modalities() {
        let name_key = fnv1a(space.modality_name(m)?.as_bytes());
        let mut mat = Matrix::zeros(space.len(), d);
        for (c, g) in shared.iter().enumerate() {
            let mut rng = keyed_rng(&[tag::ANCHOR_DELTA, cfg.anchor_seed, name_key, label_key(space, c)]);
            let row = mat.row_mut(c);
            for (x, &gv) in row.iter_mut().zip(g) {
                let delta: f64 = StandardNormal.sample(&mut rng);
                *x = gv + cfg.delta_sigma * scale * delta;
            }
            if normalize_in_place(row) == 0.0 {
                return Err(CptError::ZeroNorm { row: c });
            }
        }
        per_modality.push(mat);
    }
    Ok(Anchors { per_modality })
}

/// Stateless synthetic encoder over fixed anchors.
#[derive(Clone, Debug)]
pub struct SyntheticEncoder {
    cfg: SyntheticEncoderConfig,
    anchors: Anchors,
    noise: Vec<f64>,
    test_noise: Vec<f64>,
}

impl SyntheticEncoder {
    pub fn new(space: &LabelSpace, cfg: SyntheticEncoderConfig) -> Result<Self> {
        let anchors = make_anchors(space, &cfg)?;
        let lookup = |table: &BTreeMap<String, f64>| -> Result<Vec<f64>> {
            for name in table.keys() {
                space.modality_by_name(name)?;
            }
            space
                .modalities()
                .map(|m| Ok(table.get(space.modality_name(m)?).copied().unwrap_or(0.0)))
                .collect()
        };
        let noise = lookup(&cfg.noise_sigma)?;
        let test_noise = lookup(&cfg.test_noise_sigma)?;
        Ok(Self {
            cfg,
            anchors,
            noise,
            test_noise,
        })
    }

    pub fn config(&self) -> &SyntheticEncoderConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &Anchors {
        &self.anchors
    }

    pub fn dim(&self) -> usize {
        self.cfg.d
    }

    fn encode(&self, ref_id: u64, labels: &[usize], modality: ModalityId, source: NoiseSource) -> Result<EmbeddingRecord> {
        let anchors = self.anchors.for_modality(modality)?;
        if labels.is_empty() {
            return Err(CptError::InvalidConfig(format!("ref_id {ref_id}: no labels to encode")));
        }
        let (sigma, stream) = match source {
            NoiseSource::Caption => (self.noise[modality.index()], tag::ENCODE_CAPTION),
            NoiseSource::TestItem => (self.test_noise[modality.index()], tag::ENCODE_TEST),
            NoiseSource::ClassPrompt => (self.noise[modality.index()], tag::ENCODE_CLASS),
        };
        let d = self.cfg.d;
        let mut v = vec![0.0f64; d];
        for &l in labels {
            if l >= anchors.rows() {
                return Err(CptError::DimensionMismatch(format!("label {l} outside the anchor table")));
            }
            for (x, a) in v.iter_mut().zip(anchors.row(l)) {
                *x += a;
            }
        }
        let k = labels.len() as f64;
        v.iter_mut().for_each(|x| *x /= k);
        if sigma > 0.0 {
            let mut rng = keyed_rng(&[stream, self.cfg.anchor_seed, u64::from(modality.0), ref_id]);
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
        if normalize_in_place(&mut v) == 0.0 {
            return Err(CptError::ZeroNorm { row: ref_id as usize });
        }
        Ok(EmbeddingRecord {
            ref_id,
            modality,
            vector: v.into_iter().map(|x| x as f32).collect(),
        })
    }

    /// Embeds a caption with the caption-noise table, keyed by caption id.
    pub fn encode_caption(&self, record: &CaptionRecord) -> Result<EmbeddingRecord> {
        self.encode(record.caption_id, &record.labels, record.modality, NoiseSource::Caption)
    }

    /// Embeds a test item with the test-noise table.
    pub fn encode_test_item(&self, item_id: u64, labels: &[usize], modality: ModalityId) -> Result<EmbeddingRecord> {
        self.encode(item_id, labels, modality, NoiseSource::TestItem)
    }

    /// One class-prompt embedding per global label, in `modality`'s space;
    /// ref ids are the global label indices.
    pub fn encode_class_prompts(&self, space: &LabelSpace, modality: ModalityId) -> Result<Vec<EmbeddingRecord>> {
        (0..space.len())
            .map(|c| self.encode(c as u64, &[c], modality, NoiseSource::ClassPrompt))
            .collect()
    }

    /// Embeds an arbitrary label set with the chosen noise table.
    pub fn encode_labels(
        &self,
        ref_id: u64,
        labels: &[usize],
        modality: ModalityId,
        source: NoiseSource,
    ) -> Result<EmbeddingRecord> {
        self.encode(ref_id, labels, modality, source)
    }
}

fn check_norm(ref_id: u64, v: &[f32]) -> Result<()> {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if (n - 1.0).abs() > NORM_TOLERANCE || !n.is_finite() {
        return Err(CptError::NormViolation { ref_id, norm: n });
    }
    Ok(())
}

/// CPTE layout: magic, u32 version, u32 d, u64 count, then per record
/// u64 ref_id, u32 modality, d little-endian f32.
pub fn write_embeddings<W: Write>(w: &mut W, d: usize, records: &[EmbeddingRecord]) -> Result<()> {
    for r in records {
        if r.vector.len() != d {
            return Err(CptError::DimensionMismatch(format!(
                "ref_id {} has {} dims, file is {d}",
                r.ref_id,
                r.vector.len()
            )));
        }
        check_norm(r.ref_id, &r.vector)?;
    }
    write_header(w, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&r.ref_id.to_le_bytes())?;
        w.write_all(&r.modality.0.to_le_bytes())?;
        write_f32s(w, &r.vector)?;
    }
    Ok(())
}

/// Reads a CPTE stream; returns (d, records).
pub fn read_embeddings<R: Read>(r: &mut R) -> Result<(usize, Vec<EmbeddingRecord>)> {
    read_header(r, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
    let d = read_u32(r, "dimension")? as usize;
    let count = read_u64(r, "record count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let ref_id = read_u64(r, &format!("ref_id of record {i}"))?;
        let modality = ModalityId(read_u32(r, &format!("modality of record {i}"))?);
        let vector = read_f32s(r, d, &format!("vector of record {i}"))?;
        check_norm(ref_id, &vector)?;
        records.push(EmbeddingRecord {
            ref_id,
            modality,
            vector,
        });
    }
    expect_eof(r, "embedding records")?;
    Ok((d, records))
}
