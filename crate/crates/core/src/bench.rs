//! Synthetic benchmark: a label space, a caption corpus with embeddings,
//! held-out validation and test items, and class-prompt embeddings, all
//! derived from one seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_corpus, generate_test_items, CaptionRecord, GenConfig};
use crate::embedding::{EmbeddingRecord, SyntheticEncoder, SyntheticEncoderConfig};
use crate::error::{CptError, Result};
use crate::eval::LabeledItems;
use crate::label_space::{LabelSpace, ModalityId};
use crate::matrix::Matrix;
use crate::trainer::TrainingCorpus;

/// Test item ids start here so they never collide with validation ids.
pub const TEST_ID_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// (modality name, label count) in registration order.
    pub modalities: Vec<(String, usize)>,
    pub d: usize,
    pub captions_per_modality: usize,
    pub caption_sigma: f64,
    /// Test-item noise per modality name; missing names use `caption_sigma`.
    pub test_sigma: BTreeMap<String, f64>,
    pub delta_sigma: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modalities: vec![("video".into(), 20), ("audio".into(), 20), ("image".into(), 20)],
            d: 64,
            captions_per_modality: 2000,
            caption_sigma: 0.1,
            test_sigma: BTreeMap::from([("video".into(), 0.3), ("audio".into(), 0.1), ("image".into(), 0.1)]),
            delta_sigma: 0.05,
            val_per_class: 10,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(name) = self.test_sigma.keys().find(|n| !self.modalities.iter().any(|(m, _)| m == *n)) {
            return Err(CptError::UnknownModality(name.clone()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> SyntheticEncoderConfig {
        let names = self.modalities.iter().map(|(n, _)| n.clone());
        SyntheticEncoderConfig {
            anchor_seed: self.seed,
            delta_sigma: self.delta_sigma,
            noise_sigma: names.clone().map(|n| (n, self.caption_sigma)).collect(),
            test_noise_sigma: names
                .map(|n| {
                    let s = self.test_sigma.get(&n).copied().unwrap_or(self.caption_sigma);
                    (n, s)
                })
                .collect(),
            d: self.d,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            per_modality_count: self
                .modalities
                .iter()
                .map(|(n, _)| (n.clone(), self.captions_per_modality))
                .collect(),
            seed: self.seed,
            ..GenConfig::default()
        }
    }
}

/// Label names for the synthetic space: `<modality>_<index>`.
pub fn label_names(modality: &str, count: usize, offset: usize) -> Vec<String> {
    (offset..offset + count).map(|i| format!("{modality}_{i:02}")).collect()
}

pub fn build_space(cfg: &BenchConfig) -> Result<LabelSpace> {
    let mut space = LabelSpace::new();
    for (name, count) in &cfg.modalities {
        let m = space.register_modality(name)?;
        space.add_labels(m, &label_names(name, *count, 0))?;
    }
    Ok(space)
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: BenchConfig,
    pub space: LabelSpace,
    pub encoder: SyntheticEncoder,
    pub captions: Vec<CaptionRecord>,
    pub caption_embeddings: Vec<EmbeddingRecord>,
    pub train: TrainingCorpus,
    pub validation: Vec<LabeledItems>,
    pub test: Vec<LabeledItems>,
}

impl Benchmark {
    pub fn build(cfg: &BenchConfig) -> Result<Self> {
        Self::build_in(cfg, build_space(cfg)?)
    }

    /// Builds every artifact over a caller-supplied label space (for example
    /// one that was extended after training started).
    pub fn build_in(cfg: &BenchConfig, space: LabelSpace) -> Result<Self> {
        cfg.validate()?;
        let encoder = SyntheticEncoder::new(&space, cfg.encoder_config())?;
        let mut gen = cfg.gen_config();
        gen.per_modality_count = space
            .modalities()
            .map(|m| Ok((space.modality_name(m)?.to_owned(), cfg.captions_per_modality)))
            .collect::<Result<_>>()?;
        let captions = generate_corpus(&space, &gen)?;
        let caption_embeddings = captions
            .iter()
            .map(|c| encoder.encode_caption(c))
            .collect::<Result<Vec<_>>>()?;
        let train = TrainingCorpus::from_records(&space, &captions, &caption_embeddings)?;
        let items = |per_class: usize, base: u64| {
            space
                .modalities()
                .map(|m| labeled_items(&space, &encoder, m, per_class, base))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            validation: items(cfg.val_per_class, 0)?,
            test: items(cfg.test_per_class, TEST_ID_BASE)?,
            config: cfg.clone(),
            space,
            encoder,
            captions,
            caption_embeddings,
            train,
        })
    }

    /// Class-prompt text embeddings in `modality`'s space, one per global label.
    pub fn class_prompts(&self, modality: ModalityId) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .encoder
            .encode_class_prompts(&self.space, modality)?
            .into_iter()
            .map(|r| r.vector)
            .collect())
    }

    pub fn modality(&self, name: &str) -> Result<ModalityId> {
        self.space.modality_by_name(name)
    }
}

/// Single-label items cycling through the modality's classes, embedded
/// with the test-noise table.
pub fn labeled_items(
    space: &LabelSpace,
    encoder: &SyntheticEncoder,
    modality: ModalityId,
    per_class: usize,
    id_base: u64,
) -> Result<LabeledItems> {
    let records = generate_test_items(space, modality, per_class, id_base, encoder.config().anchor_seed)?;
    let embedded = records
        .iter()
        .map(|r| encoder.encode_test_item(r.caption_id, &r.labels, modality))
        .collect::<Result<Vec<_>>>()?;
    items_from_records(modality, &records, &embedded, encoder.dim())
}

/// Pairs item records with their embeddings (matched by id).
pub fn items_from_records(
    modality: ModalityId,
    records: &[CaptionRecord],
    embeddings: &[EmbeddingRecord],
    dim: usize,
) -> Result<LabeledItems> {
    let by_id: std::collections::HashMap<u64, &EmbeddingRecord> = embeddings.iter().map(|e| (e.ref_id, e)).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for r in records.iter().filter(|r| r.modality == modality) {
        let e = by_id
            .get(&r.caption_id)
            .ok_or_else(|| CptError::Malformed(format!("item {} has no embedding", r.caption_id)))?;
        if e.vector.len() != dim {
            return Err(CptError::DimensionMismatch(format!(
                "item {} has {} dims, expected {dim}",
                r.caption_id,
                e.vector.len()
            )));
        }
        rows.push(e.to_f64());
        labels.push(r.labels.clone());
        ids.push(r.caption_id);
    }
    Ok(LabeledItems {
        modality,
        ids,
        embeddings: if rows.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::from_rows(&rows)?
        },
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            modalities: vec![("video".into(), 4), ("image".into(), 3)],
            d: 16,
            captions_per_modality: 30,
            test_sigma: BTreeMap::from([("video".into(), 0.3)]),
            val_per_class: 2,
            test_per_class: 3,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic_and_consistent() {
        let a = Benchmark::build(&small()).unwrap();
        let b = Benchmark::build(&small()).unwrap();
        assert_eq!(a.caption_embeddings, b.caption_embeddings);
        assert_eq!(a.train.modalities[0].len(), 30);
        assert_eq!(a.test[0].len(), 12);
        assert_eq!(a.test[1].labels[0], vec![4]);
        assert!(a.test[0].ids.iter().all(|&id| id >= TEST_ID_BASE));
        assert_ne!(a.validation[0].embeddings.row(0), a.test[0].embeddings.row(0));
        let prompts = a.class_prompts(ModalityId(0)).unwrap();
        assert_eq!(prompts.len(), 7);
        let c = Benchmark::build(&BenchConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.caption_embeddings, c.caption_embeddings);
    }

    #[test]
    fn unknown_test_sigma_modality_is_rejected() {
        let mut cfg = small();
        cfg.test_sigma.insert("smell".into(), 0.2);
        assert!(Benchmark::build(&cfg).is_err());
    }
}
