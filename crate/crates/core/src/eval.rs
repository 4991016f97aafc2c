//! Zero-shot inference and metrics.
//!
//! Prompts are normalized once when a [`Classifier`] is built; test items are
//! scored by cosine similarity with no further encoding. Single-label
//! modalities are scored over their own block only.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};
use crate::label_space::{LabelSpace, ModalityId};
use crate::matrix::{dot, Matrix};
use crate::prompt_pool::{normalized_rows, PromptPool};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Similarity,
    Softmax,
    /// Sum of two softmax vectors.
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector {
    pub item_id: u64,
    pub modality: ModalityId,
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
    /// Indices that carry scores; everything else is zero and never ranked.
    pub scored: Range<usize>,
}

impl PredictionVector {
    /// Highest-scoring index; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = self.scored.start;
        for i in self.scored.clone() {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// Scored indices by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.scored.clone().collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Temperature softmax over the scored range.
    pub fn to_softmax(&self, tau: f64) -> Result<PredictionVector> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(CptError::InvalidConfig(format!("softmax temperature must be > 0, got {tau}")));
        }
        if self.scored.is_empty() {
            return Err(CptError::InvalidConfig("nothing to normalize".into()));
        }
        let max = self
            .scored
            .clone()
            .map(|i| self.scores[i] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; self.scores.len()];
        let mut z = 0.0;
        for i in self.scored.clone() {
            out[i] = (self.scores[i] / tau - max).exp();
            z += out[i];
        }
        out[self.scored.clone()].iter_mut().for_each(|v| *v /= z);
        Ok(PredictionVector {
            scores: out,
            kind: ScoreKind::Softmax,
            ..self.clone()
        })
    }
}

/// Normalized prompt rows of one pool, ready to score items.
#[derive(Clone, Debug)]
pub struct Classifier {
    dirs: Matrix,
}

impl Classifier {
    pub fn new(pool: &PromptPool) -> Result<Self> {
        Ok(Self {
            dirs: pool.normalized_rows()?,
        })
    }

    pub fn from_matrix(prompts: &Matrix) -> Result<Self> {
        Ok(Self {
            dirs: normalized_rows(prompts)?,
        })
    }

    pub fn classify(
        &self,
        space: &LabelSpace,
        item_id: u64,
        modality: ModalityId,
        embedding: &[f64],
        restrict_to_block: bool,
    ) -> Result<PredictionVector> {
        if embedding.len() != self.dirs.cols() {
            return Err(CptError::DimensionMismatch(format!(
                "item has {} dims, prompts {}",
                embedding.len(),
                self.dirs.cols()
            )));
        }
        if self.dirs.rows() != space.len() {
            return Err(CptError::DimensionMismatch(format!(
                "{} prompts for {} labels",
                self.dirs.rows(),
                space.len()
            )));
        }
        let scored = if restrict_to_block {
            space.block_range(modality)?
        } else {
            0..space.len()
        };
        if scored.is_empty() {
            return Err(CptError::EmptyBlock(space.modality_name(modality)?.to_owned()));
        }
        let mut scores = vec![0.0; space.len()];
        for j in scored.clone() {
            scores[j] = dot(embedding, self.dirs.row(j));
        }
        Ok(PredictionVector {
            item_id,
            modality,
            scores,
            kind: ScoreKind::Similarity,
            scored,
        })
    }
}

/// Labeled test items of one modality.
#[derive(Clone, Debug)]
pub struct LabeledItems {
    pub modality: ModalityId,
    pub ids: Vec<u64>,
    pub embeddings: Matrix,
    pub labels: Vec<Vec<usize>>,
}

impl LabeledItems {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fraction of items with at least one true label among the k best scores.
pub fn topk_accuracy(predictions: &[PredictionVector], truths: &[Vec<usize>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(CptError::InvalidConfig("k must be >= 1".into()));
    }
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(CptError::DimensionMismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.ranking().iter().take(k).any(|c| t.contains(c)))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapResult {
    pub map: f64,
    /// (class, AP) for classes with at least one positive.
    pub per_class: Vec<(usize, f64)>,
    /// Classes without positives, left out of the mean.
    pub excluded: Vec<usize>,
}

/// Mean over classes of average precision. Items are ranked per class by
/// descending score, ties by ascending item id.
pub fn mean_average_precision(
    predictions: &[PredictionVector],
    truths: &[Vec<usize>],
    classes: Range<usize>,
) -> Result<MapResult> {
    if predictions.len() != truths.len() {
        return Err(CptError::DimensionMismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    for c in classes {
        if predictions.iter().any(|p| c >= p.scores.len()) {
            return Err(CptError::DimensionMismatch(format!("class {c} outside prediction vectors")));
        }
        order.sort_by(|&a, &b| {
            predictions[b].scores[c]
                .total_cmp(&predictions[a].scores[c])
                .then(predictions[a].item_id.cmp(&predictions[b].item_id))
        });
        let mut positives = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &item) in order.iter().enumerate() {
            if truths[item].contains(&c) {
                positives += 1;
                precision_sum += positives as f64 / (rank + 1) as f64;
            }
        }
        if positives == 0 {
            excluded.push(c);
        } else {
            per_class.push((c, precision_sum / positives as f64));
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(MapResult {
        map,
        per_class,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_ap: Vec<(usize, f64)>,
    pub count: usize,
}

pub fn predict_all(classifier: &Classifier, space: &LabelSpace, items: &LabeledItems) -> Result<Vec<PredictionVector>> {
    (0..items.len())
        .map(|i| classifier.classify(space, items.ids[i], items.modality, items.embeddings.row(i), true))
        .collect()
}

/// Block-restricted top-1/top-5 and mAP over the modality's classes.
pub fn evaluate(classifier: &Classifier, space: &LabelSpace, items: &LabeledItems) -> Result<EvalReport> {
    let preds = predict_all(classifier, space, items)?;
    report(&preds, &items.labels, space.block_range(items.modality)?)
}

pub fn report(preds: &[PredictionVector], truths: &[Vec<usize>], classes: Range<usize>) -> Result<EvalReport> {
    let map = mean_average_precision(preds, truths, classes)?;
    Ok(EvalReport {
        top1: topk_accuracy(preds, truths, 1)?,
        top5: topk_accuracy(preds, truths, 5)?,
        map: map.map,
        per_class_ap: map.per_class,
        count: preds.len(),
    })
}

/// Classification with class text embeddings used directly as prompts.
pub fn zero_shot_baseline(space: &LabelSpace, class_embeddings: &[Vec<f32>], items: &LabeledItems) -> Result<EvalReport> {
    let pool = PromptPool::from_embeddings(space, items.modality, class_embeddings)?;
    evaluate(&Classifier::new(&pool)?, space, items)
}

/// Elementwise sum of two softmax predictions over the same classes.
pub fn fuse(supervised: &PredictionVector, tuned: &PredictionVector) -> Result<PredictionVector> {
    if supervised.scores.len() != tuned.scores.len() || supervised.scored != tuned.scored {
        return Err(CptError::DimensionMismatch(format!(
            "cannot fuse {} scores over {:?} with {} scores over {:?}",
            supervised.scores.len(),
            supervised.scored,
            tuned.scores.len(),
            tuned.scored
        )));
    }
    if supervised.kind != ScoreKind::Softmax || tuned.kind != ScoreKind::Softmax {
        return Err(CptError::InvalidConfig(
            "fusion needs softmax predictions on both sides".into(),
        ));
    }
    Ok(PredictionVector {
        item_id: tuned.item_id,
        modality: tuned.modality,
        scores: supervised.scores.iter().zip(&tuned.scores).map(|(a, b)| a + b).collect(),
        kind: ScoreKind::Fused,
        scored: tuned.scored.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct ExternalLine {
    item_id: u64,
    scores: Vec<f64>,
}

/// Reads third-party predictions: `{"item_id": u64, "scores": [..]}` per line.
pub fn read_external_predictions<R: BufRead>(r: R) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ExternalLine = serde_json::from_str(&line).map_err(|e| CptError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !parsed.scores.iter().all(|v| v.is_finite()) {
            return Err(CptError::Parse {
                line: i + 1,
                message: "non-finite score".into(),
            });
        }
        out.push((parsed.item_id, parsed.scores));
    }
    Ok(out)
}

pub fn write_external_predictions<W: Write>(w: &mut W, preds: &[(u64, Vec<f64>)]) -> Result<()> {
    for (item_id, scores) in preds {
        serde_json::to_writer(
            &mut *w,
            &ExternalLine {
                item_id: *item_id,
                scores: scores.clone(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(CptError::DimensionMismatch(format!("{} vs {} columns", a.cols(), b.cols())));
    }
    let (na, nb) = (normalized_rows(a)?, normalized_rows(b)?);
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(na.row(i), nb.row(j)));
        }
    }
    Ok(out)
}

pub const SIMILARITY_CSV_HEADER: &str = "step,row,col,cosine";

/// Long-format CSV, one line per matrix entry, nine significant digits.
pub fn write_similarity_csv<W: Write>(w: &mut W, step: u64, sims: &Matrix) -> Result<()> {
    writeln!(w, "{SIMILARITY_CSV_HEADER}")?;
    for i in 0..sims.rows() {
        for j in 0..sims.cols() {
            writeln!(w, "{step},{i},{j},{:.8e}", sims.get(i, j))?;
        }
    }
    Ok(())
}

/// Parses [`write_similarity_csv`] output into (step, row, col, value).
pub fn read_similarity_csv<R: BufRead>(r: R) -> Result<Vec<(u64, usize, usize, f64)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != SIMILARITY_CSV_HEADER {
                return Err(CptError::Parse {
                    line: 1,
                    message: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        let bad = |m: &str| CptError::Parse {
            line: i + 1,
            message: m.to_owned(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        out.push((
            f[0].parse().map_err(|_| bad("bad step"))?,
            f[1].parse().map_err(|_| bad("bad row"))?,
            f[2].parse().map_err(|_| bad("bad col"))?,
            f[3].parse().map_err(|_| bad("bad value"))?,
        ));
    }
    Ok(out)
}
