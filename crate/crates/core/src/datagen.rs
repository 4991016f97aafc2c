//! Deterministic caption synthesis.
//!
//! Each caption names a small random subset of one modality's labels inside a
//! sentence frame. The truth vector is exactly that subset, so every caption
//! carries an exact multi-label ground truth.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};
use crate::label_space::{LabelSpace, ModalityId};
use crate::rng::{keyed_rng, tag};

/// Captions must stay strictly below this many words.
pub const MAX_WORDS: usize = 25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub caption_id: u64,
    pub modality: ModalityId,
    pub text: String,
    /// Sorted global indices of the positive labels.
    pub labels: Vec<usize>,
}

impl CaptionRecord {
    /// Dense N-length binary truth vector.
    pub fn truth(&self, n: usize) -> Vec<u8> {
        let mut t = vec![0u8; n];
        for &l in &self.labels {
            t[l] = 1;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Captions per modality, keyed by modality name.
    pub per_modality_count: BTreeMap<String, usize>,
    /// Largest label subset per caption; falls back to [`default_k_max`].
    pub k_max: BTreeMap<String, usize>,
    pub seed: u64,
    pub phrase_bank: Vec<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            per_modality_count: BTreeMap::new(),
            k_max: BTreeMap::new(),
            seed: 0,
            phrase_bank: default_phrase_bank(),
        }
    }
}

/// Two labels per video caption at most, three elsewhere.
pub fn default_k_max(modality_name: &str) -> usize {
    if modality_name == "video" {
        2
    } else {
        3
    }
}

pub fn default_phrase_bank() -> Vec<String> {
    [
        "A photo of a {}.",
        "This scene clearly shows {}.",
        "Here we can notice {} right in the middle.",
        "Someone recorded {} on a quiet afternoon.",
        "The clip is mostly about {}.",
        "You can make out {} if you pay attention.",
        "In this one there is {} and not much else.",
        "It starts with {} and stays that way.",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

impl GenConfig {
    pub fn k_max_for(&self, modality_name: &str) -> usize {
        self.k_max
            .get(modality_name)
            .copied()
            .unwrap_or_else(|| default_k_max(modality_name))
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        for (name, &count) in &self.per_modality_count {
            space.modality_by_name(name)?;
            if count == 0 {
                return Err(CptError::InvalidConfig(format!("caption count for `{name}` must be > 0")));
            }
        }
        for (name, &k) in &self.k_max {
            space.modality_by_name(name)?;
            if !(1..=3).contains(&k) {
                return Err(CptError::InvalidConfig(format!("k_max for `{name}` must be 1..=3, got {k}")));
            }
        }
        if self.phrase_bank.is_empty() {
            return Err(CptError::InvalidConfig("phrase bank is empty".into()));
        }
        if let Some(f) = self.phrase_bank.iter().find(|f| f.matches("{}").count() != 1) {
            return Err(CptError::InvalidConfig(format!(
                "frame `{f}` must contain exactly one `{{}}`"
            )));
        }
        Ok(())
    }
}

/// Uniform subset size in `1..=min(k_max, block)`, then that many distinct
/// labels drawn uniformly from the block.
pub fn sample_label_subset<R: Rng>(space: &LabelSpace, modality: ModalityId, k_max: usize, rng: &mut R) -> Result<Vec<usize>> {
    let range = space.block_range(modality)?;
    if range.is_empty() {
        return Err(CptError::EmptyBlock(space.modality_name(modality)?.to_owned()));
    }
    if k_max == 0 {
        return Err(CptError::InvalidConfig("k_max must be >= 1".into()));
    }
    let k = rng.random_range(1..=k_max.min(range.len()));
    let mut picked: Vec<usize> = sample(rng, range.len(), k).into_iter().map(|i| range.start + i).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => (*one).to_owned(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Splices label names into a frame drawn from the phrase bank.
pub fn render_caption<R: Rng>(
    space: &LabelSpace,
    labels: &[usize],
    modality: ModalityId,
    phrase_bank: &[String],
    caption_id: u64,
    rng: &mut R,
) -> Result<CaptionRecord> {
    if labels.is_empty() {
        return Err(CptError::Render("no labels given".into()));
    }
    if phrase_bank.is_empty() {
        return Err(CptError::Render("empty phrase bank".into()));
    }
    let range = space.block_range(modality)?;
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut names = Vec::with_capacity(sorted.len());
    for &l in &sorted {
        if !range.contains(&l) {
            return Err(CptError::Render(format!(
                "label {l} is outside the `{}` block",
                space.modality_name(modality)?
            )));
        }
        names.push(space.label(l).expect("index within block").1);
    }
    let frame = &phrase_bank[rng.random_range(0..phrase_bank.len())];
    let text = frame.replacen("{}", &join_names(&names), 1);
    let words = text.split_whitespace().count();
    if words >= MAX_WORDS {
        return Err(CptError::Render(format!(
            "caption has {words} words, limit is {}",
            MAX_WORDS - 1
        )));
    }
    Ok(CaptionRecord {
        caption_id,
        modality,
        text,
        labels: sorted,
    })
}

/// Builds the full corpus; caption ids are dense in modality order and each
/// record is drawn from a stream keyed by (seed, caption id).
pub fn generate_corpus(space: &LabelSpace, cfg: &GenConfig) -> Result<Vec<CaptionRecord>> {
    cfg.validate(space)?;
    let mut out = Vec::new();
    let mut next_id = 0u64;
    for m in space.modalities() {
        let name = space.modality_name(m)?;
        let Some(&count) = cfg.per_modality_count.get(name) else {
            continue;
        };
        let k_max = cfg.k_max_for(name);
        for _ in 0..count {
            let mut rng = keyed_rng(&[tag::CAPTION, cfg.seed, next_id]);
            let labels = sample_label_subset(space, m, k_max, &mut rng)?;
            out.push(render_caption(space, &labels, m, &cfg.phrase_bank, next_id, &mut rng)?);
            next_id += 1;
        }
    }
    Ok(out)
}

/// Single-label test items cycling through the modality's classes, ids
/// `id_base..`. Text comes from the phrase bank; only the labels matter.
pub fn generate_test_items(
    space: &LabelSpace,
    modality: ModalityId,
    per_class: usize,
    id_base: u64,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    let block = space.block_range(modality)?;
    if block.is_empty() {
        return Err(CptError::EmptyBlock(space.modality_name(modality)?.to_owned()));
    }
    let bank = default_phrase_bank();
    (0..per_class * block.len())
        .map(|i| {
            let id = id_base + i as u64;
            let mut rng = keyed_rng(&[tag::TEST_ITEMS, seed, id]);
            render_caption(space, &[block.start + i % block.len()], modality, &bank, id, &mut rng)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: u64,
    modality: String,
    text: String,
    labels: Vec<String>,
}

/// JSON Lines with label names; indices are never stored.
pub fn write_corpus<W: Write>(w: &mut W, space: &LabelSpace, records: &[CaptionRecord]) -> Result<()> {
    for r in records {
        let line = CorpusLine {
            id: r.caption_id,
            modality: space.modality_name(r.modality)?.to_owned(),
            text: r.text.clone(),
            labels: r
                .labels
                .iter()
                .map(|&l| {
                    space
                        .label(l)
                        .map(|(_, n)| n.to_owned())
                        .ok_or_else(|| CptError::DimensionMismatch(format!("label index {l} out of range")))
                })
                .collect::<Result<_>>()?,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a corpus, resolving label names against `space`. Errors carry the
/// 1-based line number.
pub fn read_corpus<R: BufRead>(r: R, space: &LabelSpace) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| CptError::Parse { line: i + 1, message };
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let modality = space.modality_by_name(&parsed.modality).map_err(|e| at(e.to_string()))?;
        let mut labels = parsed
            .labels
            .iter()
            .map(|n| space.global_index(modality, n))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| at(e.to_string()))?;
        if labels.is_empty() {
            return Err(at("record has no labels".into()));
        }
        labels.sort_unstable();
        labels.dedup();
        out.push(CaptionRecord {
            caption_id: parsed.id,
            modality,
            text: parsed.text,
            labels,
        });
    }
    Ok(out)
}
