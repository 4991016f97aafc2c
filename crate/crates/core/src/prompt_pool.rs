//! Learnable per-modality prompt pools.
//!
//! A pool holds one `d`-dimensional prompt per global label, stored as
//! `f32` so a checkpoint captures the pool exactly. Objectives work on an
//! `f64` copy obtained through [`PromptPool::to_matrix`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};
use crate::io::{expect_eof, read_exact_or, read_f32s, read_header, read_u32, write_f32s, write_header};
use crate::label_space::{LabelSpace, ModalityId, Remap};
use crate::matrix::{norm, Matrix};
use crate::rng::{keyed_normal, tag};

pub const POOL_MAGIC: [u8; 4] = *b"CPTP";
pub const POOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Gaussian,
    FromEmbeddings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolInitConfig {
    pub kind: InitKind,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for PoolInitConfig {
    fn default() -> Self {
        Self {
            kind: InitKind::Gaussian,
            mean: 0.0,
            std: 0.02,
            seed: 0,
        }
    }
}

impl PoolInitConfig {
    pub fn gaussian(mean: f64, std: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::Gaussian,
            mean,
            std,
            seed,
        }
    }

    fn validate_gaussian(&self) -> Result<()> {
        if self.kind != InitKind::Gaussian {
            return Err(CptError::InvalidConfig(
                "fresh prompt rows need a gaussian init config".into(),
            ));
        }
        if !(self.std > 0.0 && self.std.is_finite()) || !self.mean.is_finite() {
            return Err(CptError::InvalidConfig(format!(
                "gaussian init needs finite mean and std > 0 (got mean {}, std {})",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    /// Value of entry (row, col) for this modality; independent of pool size.
    fn entry(&self, modality: ModalityId, row: usize, col: usize) -> f32 {
        let z = keyed_normal(&[tag::POOL_INIT, self.seed, u64::from(modality.0), row as u64, col as u64]);
        (self.mean + self.std * z) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    modality: ModalityId,
    dim: usize,
    params: Vec<f32>,
    frozen: Vec<bool>,
}

impl PromptPool {
    /// Gaussian initialization; each entry is keyed by (seed, modality, row, col).
    pub fn init(space: &LabelSpace, modality: ModalityId, cfg: &PoolInitConfig, dim: usize) -> Result<Self> {
        space.modality_name(modality)?;
        if dim < 2 {
            return Err(CptError::InvalidConfig(format!("prompt dimension must be >= 2, got {dim}")));
        }
        cfg.validate_gaussian()?;
        let n = space.len();
        let mut params = Vec::with_capacity(n * dim);
        for row in 0..n {
            params.extend((0..dim).map(|col| cfg.entry(modality, row, col)));
        }
        Ok(Self {
            modality,
            dim,
            params,
            frozen: vec![false; n],
        })
    }

    /// Copies class embeddings (one row per global label) verbatim.
    pub fn from_embeddings(space: &LabelSpace, modality: ModalityId, class_embeddings: &[Vec<f32>]) -> Result<Self> {
        space.modality_name(modality)?;
        if class_embeddings.len() != space.len() {
            return Err(CptError::DimensionMismatch(format!(
                "{} class embeddings for {} labels",
                class_embeddings.len(),
                space.len()
            )));
        }
        let dim = class_embeddings.first().map_or(0, Vec::len);
        if dim < 2 {
            return Err(CptError::InvalidConfig(format!("prompt dimension must be >= 2, got {dim}")));
        }
        let mut params = Vec::with_capacity(space.len() * dim);
        for (i, row) in class_embeddings.iter().enumerate() {
            if row.len() != dim {
                return Err(CptError::DimensionMismatch(format!(
                    "class embedding {i} has {} dims",
                    row.len()
                )));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(CptError::NonFinite(format!("class embedding {i}")));
            }
            params.extend_from_slice(row);
        }
        Ok(Self {
            modality,
            dim,
            params,
            frozen: vec![false; space.len()],
        })
    }

    pub fn from_parts(modality: ModalityId, dim: usize, params: Vec<f32>, frozen: Vec<bool>) -> Result<Self> {
        if dim == 0 || params.len() != frozen.len() * dim {
            return Err(CptError::DimensionMismatch(format!(
                "{} values for {} rows of dimension {dim}",
                params.len(),
                frozen.len()
            )));
        }
        Ok(Self {
            modality,
            dim,
            params,
            frozen,
        })
    }

    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.frozen.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.params[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, row: usize, frozen: bool) {
        self.frozen[row] = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows(), self.dim, self.params.iter().map(|&v| f64::from(v)).collect())
            .expect("pool shape is consistent")
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn normalized_rows(&self) -> Result<Matrix> {
        normalized_rows(&self.to_matrix())
    }

    /// Moves surviving rows according to `remap` (bit-preserving), fills the
    /// fresh rows from `cfg`, and optionally freezes every pre-existing row.
    pub fn extend(&self, remap: &Remap, new_rows: usize, cfg: &PoolInitConfig, freeze_old: bool) -> Result<Self> {
        if remap.old_len() != self.rows() {
            return Err(CptError::InvalidRemap(format!(
                "remap covers {} rows, pool has {}",
                remap.old_len(),
                self.rows()
            )));
        }
        if remap.new_len() != self.rows() + new_rows {
            return Err(CptError::InvalidRemap(format!(
                "remap targets {} rows, expected {} + {new_rows}",
                remap.new_len(),
                self.rows()
            )));
        }
        let fresh = remap.validate()?;
        if !fresh.is_empty() {
            cfg.validate_gaussian()?;
        }
        let n = remap.new_len();
        let mut params = vec![0.0f32; n * self.dim];
        let mut frozen = vec![false; n];
        for old in 0..self.rows() {
            let new = remap.get(old);
            params[new * self.dim..(new + 1) * self.dim].copy_from_slice(self.row(old));
            frozen[new] = self.frozen[old] || freeze_old;
        }
        for &row in &fresh {
            for col in 0..self.dim {
                params[row * self.dim + col] = cfg.entry(self.modality, row, col);
            }
        }
        Ok(Self {
            modality: self.modality,
            dim: self.dim,
            params,
            frozen,
        })
    }

    /// CPTP layout: magic, u32 version, u32 modality, u32 N, u32 d,
    /// N*d little-endian f32 row-major, N freeze bytes.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, POOL_MAGIC, POOL_VERSION)?;
        for v in [self.modality.0, self.rows() as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f32s(w, &self.params)?;
        let flags: Vec<u8> = self.frozen.iter().map(|&f| u8::from(f)).collect();
        w.write_all(&flags)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_header(r, POOL_MAGIC, POOL_VERSION)?;
        let modality = ModalityId(read_u32(r, "modality id")?);
        let n = read_u32(r, "row count")? as usize;
        let dim = read_u32(r, "dimension")? as usize;
        let params = read_f32s(r, n * dim, "prompt values")?;
        let mut flags = vec![0u8; n];
        read_exact_or(r, &mut flags, "freeze flags")?;
        let frozen = flags
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(CptError::Malformed(format!("freeze flag byte {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        expect_eof(r, "pool")?;
        Self::from_parts(modality, dim, params, frozen)
    }
}

/// Rows of `m` scaled to unit norm; errors on an all-zero row.
pub fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(CptError::ZeroNorm { row: i });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}
