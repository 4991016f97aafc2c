//! Global label set partitioned into contiguous per-modality blocks.
//!
//! Global indices are the concatenation of modality blocks in registration
//! order. Adding labels to a modality shifts every later block, and the
//! shift is reported as a [`Remap`] so pools and optimizer state can follow.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};

/// Dense modality index in registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(pub u32);

impl ModalityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    name: String,
    labels: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSpace {
    blocks: Vec<Block>,
}

/// Old global index → new global index after an extension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Remap {
    map: Vec<usize>,
    new_len: usize,
}

impl Remap {
    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
            new_len: n,
        }
    }

    pub fn new(map: Vec<usize>, new_len: usize) -> Self {
        Self { map, new_len }
    }

    pub fn old_len(&self) -> usize {
        self.map.len()
    }

    pub fn new_len(&self) -> usize {
        self.new_len
    }

    pub fn get(&self, old: usize) -> usize {
        self.map[old]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// Applies `self` then `next`.
    pub fn then(&self, next: &Remap) -> Result<Remap> {
        if next.old_len() != self.new_len {
            return Err(CptError::InvalidRemap(format!(
                "cannot compose: {} outputs into {} inputs",
                self.new_len,
                next.old_len()
            )));
        }
        Ok(Remap {
            map: self.map.iter().map(|&i| next.map[i]).collect(),
            new_len: next.new_len,
        })
    }

    /// Checks the table is injective and in range; returns the fresh target rows.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut hit = vec![false; self.new_len];
        for (old, &new) in self.map.iter().enumerate() {
            if new >= self.new_len {
                return Err(CptError::InvalidRemap(format!(
                    "{old} -> {new} is out of range for {} rows",
                    self.new_len
                )));
            }
            if std::mem::replace(&mut hit[new], true) {
                return Err(CptError::InvalidRemap(format!("target {new} is hit twice")));
            }
        }
        Ok(hit.iter().enumerate().filter_map(|(i, &h)| (!h).then_some(i)).collect())
    }
}

/// Outcome of [`LabelSpace::add_labels`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extension {
    pub new_indices: Vec<usize>,
    pub remap: Remap,
}

impl LabelSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_modality(&mut self, name: &str) -> Result<ModalityId> {
        if name.is_empty()
            || !name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
        {
            return Err(CptError::InvalidModalityName(name.to_owned()));
        }
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(CptError::DuplicateModality(name.to_owned()));
        }
        self.blocks.push(Block {
            name: name.to_owned(),
            labels: Vec::new(),
        });
        Ok(ModalityId(self.blocks.len() as u32 - 1))
    }

    /// Appends labels to a modality's block and reports how existing global
    /// indices moved.
    pub fn add_labels<S: AsRef<str>>(&mut self, modality: ModalityId, names: &[S]) -> Result<Extension> {
        let block = self.block(modality)?;
        let mut seen: Vec<&str> = block.labels.iter().map(String::as_str).collect();
        for n in names {
            let n = n.as_ref();
            if seen.contains(&n) {
                return Err(CptError::DuplicateLabel {
                    modality: block.name.clone(),
                    label: n.to_owned(),
                });
            }
            seen.push(n);
        }

        let old_len = self.len();
        let range = self.block_range(modality)?;
        let inserted = names.len();
        let map = (0..old_len).map(|i| if i < range.end { i } else { i + inserted }).collect();
        let new_indices = (range.end..range.end + inserted).collect();

        self.blocks[modality.index()]
            .labels
            .extend(names.iter().map(|n| n.as_ref().to_owned()));
        Ok(Extension {
            new_indices,
            remap: Remap::new(map, old_len + inserted),
        })
    }

    /// Total label count N.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.labels.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn modalities(&self) -> impl Iterator<Item = ModalityId> + '_ {
        (0..self.blocks.len() as u32).map(ModalityId)
    }

    pub fn modality_name(&self, modality: ModalityId) -> Result<&str> {
        Ok(&self.block(modality)?.name)
    }

    pub fn modality_by_name(&self, name: &str) -> Result<ModalityId> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| ModalityId(i as u32))
            .ok_or_else(|| CptError::UnknownModality(name.to_owned()))
    }

    /// Global index range owned by a modality.
    pub fn block_range(&self, modality: ModalityId) -> Result<Range<usize>> {
        self.block(modality)?;
        let start: usize = self.blocks[..modality.index()].iter().map(|b| b.labels.len()).sum();
        Ok(start..start + self.blocks[modality.index()].labels.len())
    }

    /// N-length indicator of the modality's block.
    pub fn block_mask(&self, modality: ModalityId) -> Result<Vec<u8>> {
        let range = self.block_range(modality)?;
        Ok((0..self.len()).map(|i| u8::from(range.contains(&i))).collect())
    }

    pub fn labels(&self, modality: ModalityId) -> Result<&[String]> {
        Ok(&self.block(modality)?.labels)
    }

    /// Owning modality and name of a global index.
    pub fn label(&self, global: usize) -> Option<(ModalityId, &str)> {
        let mut start = 0;
        for (m, b) in self.blocks.iter().enumerate() {
            if global < start + b.labels.len() {
                return Some((ModalityId(m as u32), &b.labels[global - start]));
            }
            start += b.labels.len();
        }
        None
    }

    pub fn owner(&self, global: usize) -> Option<ModalityId> {
        self.label(global).map(|(m, _)| m)
    }

    pub fn global_index(&self, modality: ModalityId, name: &str) -> Result<usize> {
        let range = self.block_range(modality)?;
        let block = &self.blocks[modality.index()];
        block
            .labels
            .iter()
            .position(|l| l == name)
            .map(|i| range.start + i)
            .ok_or_else(|| CptError::UnknownLabel {
                modality: block.name.clone(),
                label: name.to_owned(),
            })
    }

    /// Whether `self` is a prefix-wise extension of `older`: same modalities in
    /// the same order (possibly more), each older block a prefix of the new one.
    pub fn extends(&self, older: &LabelSpace) -> bool {
        older.blocks.len() <= self.blocks.len()
            && older
                .blocks
                .iter()
                .zip(&self.blocks)
                .all(|(o, n)| o.name == n.name && n.labels.len() >= o.labels.len() && n.labels[..o.labels.len()] == o.labels[..])
    }

    fn block(&self, modality: ModalityId) -> Result<&Block> {
        self.blocks
            .get(modality.index())
            .ok_or_else(|| CptError::UnknownModality(modality.to_string()))
    }

    pub fn to_manifest(&self) -> LabelManifest {
        LabelManifest {
            version: 1,
            modalities: self
                .blocks
                .iter()
                .map(|b| ManifestModality {
                    name: b.name.clone(),
                    labels: b.labels.clone(),
                })
                .collect(),
        }
    }

    pub fn from_manifest(manifest: &LabelManifest) -> Result<Self> {
        if manifest.version != 1 {
            return Err(CptError::VersionMismatch {
                expected: 1,
                found: manifest.version,
            });
        }
        let mut space = LabelSpace::new();
        for m in &manifest.modalities {
            let id = space.register_modality(&m.name)?;
            space.add_labels(id, &m.labels)?;
        }
        Ok(space)
    }
}

/// On-disk label manifest; block order is array order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub version: u32,
    pub modalities: Vec<ManifestModality>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestModality {
    pub name: String,
    pub labels: Vec<String>,
}

impl LabelManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(sizes: &[(&str, usize)]) -> LabelSpace {
        let mut s = LabelSpace::new();
        for (name, n) in sizes {
            let id = s.register_modality(name).unwrap();
            let labels: Vec<String> = (0..*n).map(|i| format!("{name}{i}")).collect();
            s.add_labels(id, &labels).unwrap();
        }
        s
    }

    #[test]
    fn registration_is_dense() {
        let mut s = LabelSpace::new();
        assert_eq!(s.register_modality("video").unwrap(), ModalityId(0));
        assert_eq!(s.register_modality("audio").unwrap(), ModalityId(1));
        assert_eq!(s.register_modality("image").unwrap(), ModalityId(2));
        assert!(matches!(s.register_modality("video"), Err(CptError::DuplicateModality(_))));
        assert!(s.register_modality("Video").is_err());
        assert!(s.register_modality("").is_err());
    }

    #[test]
    fn add_labels_to_empty_block() {
        let mut s = LabelSpace::new();
        let v = s.register_modality("video").unwrap();
        let ext = s.add_labels(v, &["archery", "juggling"]).unwrap();
        assert_eq!(ext.new_indices, vec![0, 1]);
        assert!(matches!(s.add_labels(v, &["archery"]), Err(CptError::DuplicateLabel { .. })));
        assert!(s.add_labels(v, &["x", "x"]).is_err());
    }

    #[test]
    fn insertion_shifts_later_blocks() {
        let mut s = space(&[("video", 2), ("audio", 1), ("image", 1)]);
        let ext = s.add_labels(ModalityId(1), &["bark"]).unwrap();
        assert_eq!(ext.new_indices, vec![3]);
        assert_eq!(ext.remap.as_slice(), &[0, 1, 2, 4]);
        assert_eq!(ext.remap.new_len(), 5);
        assert_eq!(s.label(4).unwrap().1, "image0");
        assert_eq!(s.label(3).unwrap().1, "bark");
    }

    #[test]
    fn masks() {
        let s = space(&[("video", 2), ("audio", 2), ("image", 1)]);
        assert_eq!(s.block_mask(ModalityId(1)).unwrap(), vec![0, 0, 1, 1, 0]);
        assert_eq!(s.block_mask(ModalityId(0)).unwrap(), vec![1, 1, 0, 0, 0]);
        assert!(s.block_mask(ModalityId(7)).is_err());
    }

    #[test]
    fn same_name_in_two_modalities_is_two_labels() {
        let mut s = LabelSpace::new();
        let a = s.register_modality("audio").unwrap();
        let i = s.register_modality("image").unwrap();
        s.add_labels(a, &["dog"]).unwrap();
        s.add_labels(i, &["dog"]).unwrap();
        assert_eq!(s.global_index(a, "dog").unwrap(), 0);
        assert_eq!(s.global_index(i, "dog").unwrap(), 1);
    }

    #[test]
    fn manifest_round_trip() {
        let s = space(&[("video", 3), ("audio", 0), ("image", 2)]);
        let json = s.to_manifest().to_json().unwrap();
        let back = LabelSpace::from_manifest(&LabelManifest::from_json(&json).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn remap_validation() {
        assert_eq!(Remap::new(vec![0, 2], 3).validate().unwrap(), vec![1]);
        assert!(Remap::new(vec![1, 1], 3).validate().is_err());
        assert!(Remap::new(vec![0, 3], 3).validate().is_err());
    }

    proptest! {
        #[test]
        fn masks_partition_and_remap_is_sound(
            sizes in prop::collection::vec(0usize..5, 1..4),
            target in 0usize..4,
            extra in 0usize..4,
        ) {
            let names = ["video", "audio", "image", "depth"];
            let spec: Vec<(&str, usize)> = sizes.iter().enumerate().map(|(i, &n)| (names[i], n)).collect();
            let mut s = space(&spec);
            let n = s.len();
            let mut total = vec![0u8; n];
            for m in s.modalities() {
                for (t, v) in total.iter_mut().zip(s.block_mask(m).unwrap()) {
                    *t += v;
                }
            }
            prop_assert!(total.iter().all(|&t| t == 1));

            let before: Vec<String> = (0..n).map(|i| s.label(i).unwrap().1.to_owned()).collect();
            let target = ModalityId((target % sizes.len()) as u32);
            let new: Vec<String> = (0..extra).map(|i| format!("new{i}")).collect();
            let ext = s.add_labels(target, &new).unwrap();
            prop_assert_eq!(ext.remap.validate().unwrap(), ext.new_indices.clone());
            for (old, name) in before.iter().enumerate() {
                prop_assert_eq!(s.label(ext.remap.get(old)).unwrap().1, name.as_str());
            }
            let range = s.block_range(target).unwrap();
            prop_assert_eq!(ext.new_indices.last().map(|&i| i + 1).unwrap_or(range.end), range.end);
        }
    }
}
