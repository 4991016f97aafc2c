//! Training objectives and their analytic gradients.
//!
//! * intra-modal: a pairwise hinge (ranking) loss between caption embeddings
//!   and one modality's prompt pool. Negatives are every global label that is
//!   not positive for the caption, including other modalities' slots.
//! * inter-modal: for each strong modality, a temperature-scaled softmax over
//!   the strong pool for every weak-pool row inside the strong modality's
//!   block, scored against the matching diagonal entry. Rows outside that
//!   block contribute nothing. In uni-directional mode the strong pools are
//!   constants.
//!
//! All reductions run in a fixed order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};
use crate::label_space::{LabelSpace, ModalityId};
use crate::matrix::{dot, norm, Matrix};
use crate::rng::{keyed_rng, tag};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Inner product with the unit-normalized prompt row.
    #[default]
    Cosine,
    /// Raw inner product with the prompt row.
    Dot,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Uni,
    Bi,
}

/// Prompt rows ready for scoring, plus the norms needed to backpropagate.
struct Prepared {
    dirs: Matrix,
    norms: Vec<f64>,
    mode: SimilarityMode,
}

fn prepare(pool: &Matrix, mode: SimilarityMode) -> Result<Prepared> {
    let norms = pool.row_norms();
    let dirs = match mode {
        SimilarityMode::Dot => pool.clone(),
        SimilarityMode::Cosine => {
            let mut d = pool.clone();
            for (i, &n) in norms.iter().enumerate() {
                if n == 0.0 {
                    return Err(CptError::ZeroNorm { row: i });
                }
                d.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
            d
        }
    };
    Ok(Prepared { dirs, norms, mode })
}

fn scores(embeddings: &Matrix, prepared: &Prepared) -> Matrix {
    let (b, n) = (embeddings.rows(), prepared.dirs.rows());
    let mut s = Matrix::zeros(b, n);
    for k in 0..b {
        let h = embeddings.row(k);
        for j in 0..n {
            s.set(k, j, dot(h, prepared.dirs.row(j)));
        }
    }
    s
}

/// Accumulates dL/dpool given dL/dsims.
fn scores_backward(embeddings: &Matrix, prepared: &Prepared, sims: &Matrix, dsims: &Matrix, grad: &mut Matrix) {
    let d = embeddings.cols();
    for j in 0..prepared.dirs.rows() {
        let mut acc = vec![0.0; d];
        let mut radial = 0.0;
        let mut any = false;
        for k in 0..embeddings.rows() {
            let g = dsims.get(k, j);
            if g == 0.0 {
                continue;
            }
            any = true;
            for (a, h) in acc.iter_mut().zip(embeddings.row(k)) {
                *a += g * h;
            }
            radial += g * sims.get(k, j);
        }
        if !any {
            continue;
        }
        let out = grad.row_mut(j);
        match prepared.mode {
            SimilarityMode::Dot => {
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o += a;
                }
            }
            SimilarityMode::Cosine => {
                let inv = 1.0 / prepared.norms[j];
                for ((o, a), u) in out.iter_mut().zip(&acc).zip(prepared.dirs.row(j)) {
                    *o += inv * (a - radial * u);
                }
            }
        }
    }
}

/// B x N similarity matrix between embeddings and prompt rows.
pub fn similarity(embeddings: &Matrix, pool: &Matrix, mode: SimilarityMode) -> Result<Matrix> {
    if embeddings.cols() != pool.cols() {
        return Err(CptError::DimensionMismatch(format!(
            "embeddings have {} dims, prompts {}",
            embeddings.cols(),
            pool.cols()
        )));
    }
    Ok(scores(embeddings, &prepare(pool, mode)?))
}

/// One modality's caption batch: unit-norm embeddings and positive label sets.
#[derive(Clone, Debug)]
pub struct IntraBatch {
    pub modality: ModalityId,
    pub embeddings: Matrix,
    pub positives: Vec<Vec<usize>>,
}

impl IntraBatch {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    fn validate(&self, space: &LabelSpace) -> Result<()> {
        if self.is_empty() || self.embeddings.rows() != self.len() {
            return Err(CptError::DimensionMismatch(format!(
                "batch has {} embeddings and {} truth rows",
                self.embeddings.rows(),
                self.len()
            )));
        }
        let block = space.block_range(self.modality)?;
        for (k, pos) in self.positives.iter().enumerate() {
            if pos.is_empty() {
                return Err(CptError::InvalidConfig(format!("batch row {k} has no positive label")));
            }
            if let Some(l) = pos.iter().find(|l| !block.contains(l)) {
                return Err(CptError::InvalidConfig(format!(
                    "batch row {k}: positive {l} is outside the `{}` block",
                    space.modality_name(self.modality)?
                )));
            }
        }
        Ok(())
    }
}

/// Hinge ranking loss averaged over the batch, with dL/dsims.
///
/// Every (positive i, negative j) pair contributes `max(0, margin - s_ki + s_kj)`.
pub fn ranking_loss(positives: &[Vec<usize>], sims: &Matrix, margin: f64) -> Result<(f64, Matrix)> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(CptError::InvalidConfig(format!("margin must be > 0, got {margin}")));
    }
    if positives.len() != sims.rows() {
        return Err(CptError::DimensionMismatch(format!(
            "{} truth rows for {} similarity rows",
            positives.len(),
            sims.rows()
        )));
    }
    let (b, n) = (sims.rows(), sims.cols());
    let mut grad = Matrix::zeros(b, n);
    let mut loss = 0.0;
    let mut is_pos = vec![false; n];
    for (k, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            return Err(CptError::InvalidConfig(format!("row {k} has no positive label")));
        }
        is_pos.iter_mut().for_each(|p| *p = false);
        for &i in pos {
            if i >= n {
                return Err(CptError::DimensionMismatch(format!("positive {i} outside {n} labels")));
            }
            is_pos[i] = true;
        }
        let row = sims.row(k);
        let grow = grad.row_mut(k);
        for &i in pos {
            for j in (0..n).filter(|&j| !is_pos[j]) {
                let v = margin - row[i] + row[j];
                if v > 0.0 {
                    loss += v;
                    grow[i] -= 1.0;
                    grow[j] += 1.0;
                }
            }
        }
    }
    let inv_b = 1.0 / b as f64;
    grad.scale(inv_b);
    Ok((loss * inv_b, grad))
}

/// Intra-modal terms: per-modality ranking losses and per-pool gradients.
#[derive(Clone, Debug)]
pub struct IntraTerms {
    pub per_modality: Vec<f64>,
    pub total: f64,
    pub grads: Vec<Matrix>,
}

pub fn intra_loss(
    space: &LabelSpace,
    batches: &[IntraBatch],
    pools: &[Matrix],
    margin: f64,
    mode: SimilarityMode,
) -> Result<IntraTerms> {
    check_pools(space, pools)?;
    let mut per_modality = vec![0.0; pools.len()];
    let mut grads: Vec<Matrix> = pools.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut seen = vec![false; pools.len()];
    for batch in batches {
        batch.validate(space)?;
        let m = batch.modality.index();
        if std::mem::replace(&mut seen[m], true) {
            return Err(CptError::InvalidConfig(format!(
                "two batches for modality {}",
                batch.modality
            )));
        }
        if batch.embeddings.cols() != pools[m].cols() {
            return Err(CptError::DimensionMismatch(format!(
                "embeddings have {} dims, prompts {}",
                batch.embeddings.cols(),
                pools[m].cols()
            )));
        }
        let prepared = prepare(&pools[m], mode)?;
        let sims = scores(&batch.embeddings, &prepared);
        let (loss, dsims) = ranking_loss(&batch.positives, &sims, margin)?;
        per_modality[m] = loss;
        scores_backward(&batch.embeddings, &prepared, &sims, &dsims, &mut grads[m]);
    }
    let total = per_modality.iter().sum();
    Ok(IntraTerms {
        per_modality,
        total,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterConfig {
    pub weak: ModalityId,
    pub strong: Vec<ModalityId>,
    pub tau: f64,
    pub direction: Direction,
}

impl InterConfig {
    fn validate(&self, space: &LabelSpace) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CptError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        space.modality_name(self.weak)?;
        for (i, &s) in self.strong.iter().enumerate() {
            space.modality_name(s)?;
            if s == self.weak {
                return Err(CptError::InvalidConfig(format!("modality {s} is both weak and strong")));
            }
            if self.strong[..i].contains(&s) {
                return Err(CptError::InvalidConfig(format!("strong modality {s} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InterTerms {
    pub per_strong: Vec<(ModalityId, f64)>,
    pub total: f64,
    pub grads: Vec<Matrix>,
}

/// Masked softmax cross-entropy of `rows` of `left` against all rows of
/// `right` (both unit-normalized), target = same index. Returns the mean loss
/// and accumulates gradients into the raw pools when requested.
#[allow(clippy::too_many_arguments)]
fn masked_contrastive(
    left: &Prepared,
    right: &Prepared,
    rows: std::ops::Range<usize>,
    tau: f64,
    weight: f64,
    grad_left: Option<&mut Matrix>,
    grad_right: Option<&mut Matrix>,
) -> f64 {
    let n = right.dirs.rows();
    let count = rows.len() as f64;
    let mut loss = 0.0;
    // dL/dS for the masked rows, |rows| x n
    let mut ds = Matrix::zeros(rows.len(), n);
    let mut s = Matrix::zeros(rows.len(), n);
    for (r, i) in rows.clone().enumerate() {
        let li = left.dirs.row(i);
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            let v = dot(li, right.dirs.row(k));
            s.set(r, k, v);
            max = max.max(v / tau);
        }
        let mut denom = 0.0;
        for k in 0..n {
            denom += (s.get(r, k) / tau - max).exp();
        }
        let lse = max + denom.ln();
        loss += lse - s.get(r, i) / tau;
        for k in 0..n {
            let p = (s.get(r, k) / tau - lse).exp();
            let target = if k == i { 1.0 } else { 0.0 };
            ds.set(r, k, weight * (p - target) / (tau * count));
        }
    }
    if let Some(g) = grad_left {
        let d = left.dirs.cols();
        for (r, i) in rows.clone().enumerate() {
            let mut acc = vec![0.0; d];
            let mut radial = 0.0;
            for k in 0..n {
                let w = ds.get(r, k);
                for (a, u) in acc.iter_mut().zip(right.dirs.row(k)) {
                    *a += w * u;
                }
                radial += w * s.get(r, k);
            }
            let inv = 1.0 / left.norms[i];
            for ((o, a), u) in g.row_mut(i).iter_mut().zip(&acc).zip(left.dirs.row(i)) {
                *o += inv * (a - radial * u);
            }
        }
    }
    if let Some(g) = grad_right {
        let d = right.dirs.cols();
        for k in 0..n {
            let mut acc = vec![0.0; d];
            let mut radial = 0.0;
            for (r, i) in rows.clone().enumerate() {
                let w = ds.get(r, k);
                for (a, u) in acc.iter_mut().zip(left.dirs.row(i)) {
                    *a += w * u;
                }
                radial += w * s.get(r, k);
            }
            let inv = 1.0 / right.norms[k];
            for ((o, a), u) in g.row_mut(k).iter_mut().zip(&acc).zip(right.dirs.row(k)) {
                *o += inv * (a - radial * u);
            }
        }
    }
    loss / count
}

/// Inter-modal loss summed over strong modalities.
pub fn inter_loss(space: &LabelSpace, pools: &[Matrix], cfg: &InterConfig) -> Result<InterTerms> {
    check_pools(space, pools)?;
    if space.modality_count() < 2 {
        return Err(CptError::InvalidConfig(
            "inter-modal loss needs at least two modalities".into(),
        ));
    }
    cfg.validate(space)?;
    let mut grads: Vec<Matrix> = pools.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let w = cfg.weak.index();
    let weak = prepare(&pools[w], SimilarityMode::Cosine)?;
    let mut per_strong = Vec::with_capacity(cfg.strong.len());
    for &t in &cfg.strong {
        let rows = space.block_range(t)?;
        if rows.is_empty() {
            per_strong.push((t, 0.0));
            continue;
        }
        let strong = prepare(&pools[t.index()], SimilarityMode::Cosine)?;
        let loss = match cfg.direction {
            Direction::Uni => masked_contrastive(&weak, &strong, rows, cfg.tau, 1.0, Some(&mut grads[w]), None),
            Direction::Bi => {
                let (gw, gt) = two_mut(&mut grads, w, t.index());
                let fwd = masked_contrastive(&weak, &strong, rows.clone(), cfg.tau, 0.5, Some(&mut *gw), Some(&mut *gt));
                let rev = masked_contrastive(&strong, &weak, rows, cfg.tau, 0.5, Some(gt), Some(gw));
                0.5 * (fwd + rev)
            }
        };
        per_strong.push((t, loss));
    }
    let total = per_strong.iter().map(|(_, l)| l).sum();
    Ok(InterTerms {
        per_strong,
        total,
        grads,
    })
}

fn two_mut(v: &mut [Matrix], a: usize, b: usize) -> (&mut Matrix, &mut Matrix) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn check_pools(space: &LabelSpace, pools: &[Matrix]) -> Result<()> {
    if pools.len() != space.modality_count() {
        return Err(CptError::DimensionMismatch(format!(
            "{} pools for {} modalities",
            pools.len(),
            space.modality_count()
        )));
    }
    let d = pools.first().map_or(0, Matrix::cols);
    for (m, p) in pools.iter().enumerate() {
        if p.rows() != space.len() || p.cols() != d {
            return Err(CptError::DimensionMismatch(format!(
                "pool {m} is {}x{}, expected {}x{d}",
                p.rows(),
                p.cols(),
                space.len()
            )));
        }
    }
    Ok(())
}

/// Combined losses and per-pool gradients for one evaluation.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub grads: Vec<Matrix>,
    pub intra_per_modality: Vec<f64>,
    pub inter_per_strong: Vec<(ModalityId, f64)>,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

/// `lambda1 * intra + lambda2 * inter`; rows flagged in `frozen` get zero
/// gradient. A term with zero weight is skipped outright.
pub fn total_loss(
    intra: Option<&IntraTerms>,
    inter: Option<&InterTerms>,
    lambda1: f64,
    lambda2: f64,
    shapes: &[(usize, usize)],
    frozen: Option<&[Vec<bool>]>,
) -> Result<GradientBundle> {
    for (name, l) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CptError::InvalidConfig(format!("{name} must be finite and >= 0, got {l}")));
        }
    }
    let mut grads: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    let mut bundle_intra = 0.0;
    let mut intra_per_modality = vec![0.0; shapes.len()];
    if let Some(t) = intra {
        bundle_intra = t.total;
        intra_per_modality.clone_from(&t.per_modality);
        if lambda1 > 0.0 {
            for (g, ti) in grads.iter_mut().zip(&t.grads) {
                g.add_assign_scaled(ti, lambda1);
            }
        }
    }
    let mut bundle_inter = 0.0;
    let mut inter_per_strong = Vec::new();
    if let Some(t) = inter {
        bundle_inter = t.total;
        inter_per_strong.clone_from(&t.per_strong);
        if lambda2 > 0.0 {
            for (g, ti) in grads.iter_mut().zip(&t.grads) {
                g.add_assign_scaled(ti, lambda2);
            }
        }
    }
    if let Some(frozen) = frozen {
        for (g, f) in grads.iter_mut().zip(frozen) {
            for (row, &is_frozen) in f.iter().enumerate() {
                if is_frozen {
                    g.row_mut(row).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    let mut total = 0.0;
    if lambda1 > 0.0 {
        total += lambda1 * bundle_intra;
    }
    if lambda2 > 0.0 {
        total += lambda2 * bundle_inter;
    }
    Ok(GradientBundle {
        grads,
        intra_per_modality,
        inter_per_strong,
        intra: bundle_intra,
        inter: bundle_inter,
        total,
    })
}

/// The full training objective over a fixed set of batches.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub space: &'a LabelSpace,
    pub batches: &'a [IntraBatch],
    pub margin: f64,
    pub mode: SimilarityMode,
    pub inter: Option<InterConfig>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Objective<'_> {
    pub fn evaluate(&self, pools: &[Matrix], frozen: Option<&[Vec<bool>]>) -> Result<GradientBundle> {
        let intra = if self.lambda1 > 0.0 && !self.batches.is_empty() {
            Some(intra_loss(self.space, self.batches, pools, self.margin, self.mode)?)
        } else {
            None
        };
        let inter = match &self.inter {
            Some(cfg) if self.lambda2 > 0.0 => Some(inter_loss(self.space, pools, cfg)?),
            _ => None,
        };
        let shapes: Vec<_> = pools.iter().map(|p| (p.rows(), p.cols())).collect();
        total_loss(intra.as_ref(), inter.as_ref(), self.lambda1, self.lambda2, &shapes, frozen)
    }

    pub fn value(&self, pools: &[Matrix]) -> Result<f64> {
        Ok(self.evaluate(pools, None)?.total)
    }

    /// Loss at `pools` with the stop-gradient honored: in uni-directional
    /// mode the inter-modal term reads the strong pools from `detached`.
    pub fn value_detached(&self, pools: &[Matrix], detached: &[Matrix]) -> Result<f64> {
        let mut total = 0.0;
        if self.lambda1 > 0.0 && !self.batches.is_empty() {
            total += self.lambda1 * intra_loss(self.space, self.batches, pools, self.margin, self.mode)?.total;
        }
        if let Some(cfg) = self.inter.as_ref().filter(|_| self.lambda2 > 0.0) {
            let inter = match cfg.direction {
                Direction::Bi => inter_loss(self.space, pools, cfg)?,
                Direction::Uni => {
                    let mut mixed = detached.to_vec();
                    mixed[cfg.weak.index()] = pools[cfg.weak.index()].clone();
                    inter_loss(self.space, &mixed, cfg)?
                }
            };
            total += self.lambda2 * inter.total;
        }
        Ok(total)
    }

    /// Whether perturbing any entry of (pool, row) by `h` may cross a hinge kink.
    fn near_kink(&self, pools: &[Matrix], pool: usize, row: usize, h: f64) -> Result<bool> {
        if self.lambda1 == 0.0 {
            return Ok(false);
        }
        let Some(batch) = self.batches.iter().find(|b| b.modality.index() == pool) else {
            return Ok(false);
        };
        let sensitivity = match self.mode {
            SimilarityMode::Dot => 1.0,
            SimilarityMode::Cosine => (2.0 / norm(pools[pool].row(row))).max(1.0),
        };
        let threshold = 10.0 * h * sensitivity;
        let sims = similarity(&batch.embeddings, &pools[pool], self.mode)?;
        for (k, pos) in batch.positives.iter().enumerate() {
            let s = sims.row(k);
            for &i in pos {
                for j in (0..s.len()).filter(|j| !pos.contains(j)) {
                    if (i == row || j == row) && (self.margin - s[i] + s[j]).abs() < threshold {
                        return Ok(true);
                    }
                }
            }
        }
        Ok(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Coordinate {
    pub pool: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub excluded: Vec<Coordinate>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub worst: Option<Coordinate>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

/// Which coordinates a gradient check visits.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    Sample { count: usize, seed: u64 },
}

/// Central-difference check of the analytic gradient; coordinates whose
/// perturbation may cross a hinge kink are skipped and listed. Strong pools
/// stay detached from the uni-directional inter term while perturbed.
pub fn finite_difference_check(
    objective: &Objective<'_>,
    pools: &[Matrix],
    h: f64,
    tolerance: f64,
    selection: CoordSelection,
) -> Result<GradCheckReport> {
    use rand::Rng;

    if h.is_nan() || h <= 0.0 {
        return Err(CptError::InvalidConfig(format!("step h must be > 0, got {h}")));
    }
    let analytic = objective.evaluate(pools, None)?;
    let mut coords = Vec::new();
    for (p, m) in pools.iter().enumerate() {
        for row in 0..m.rows() {
            for col in 0..m.cols() {
                coords.push(Coordinate { pool: p, row, col });
            }
        }
    }
    if let CoordSelection::Sample { count, seed } = selection {
        if count < coords.len() {
            let mut rng = keyed_rng(&[tag::GRADCHECK, seed]);
            for i in 0..count {
                let j = rng.random_range(i..coords.len());
                coords.swap(i, j);
            }
            coords.truncate(count);
        }
    }

    let mut work = pools.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        excluded: Vec::new(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    for c in coords {
        if objective.near_kink(pools, c.pool, c.row, h)? {
            report.excluded.push(c);
            continue;
        }
        let base = work[c.pool].get(c.row, c.col);
        work[c.pool].set(c.row, c.col, base + h);
        let plus = objective.value_detached(&work, pools)?;
        work[c.pool].set(c.row, c.col, base - h);
        let minus = objective.value_detached(&work, pools)?;
        work[c.pool].set(c.row, c.col, base);

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.grads[c.pool].get(c.row, c.col);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
        report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(c);
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

/// A random small instance (N <= 12, d <= 16, B <= 8) for gradient checks.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub space: LabelSpace,
    pub batches: Vec<IntraBatch>,
    pub pools: Vec<Matrix>,
    pub margin: f64,
    pub mode: SimilarityMode,
    pub inter: InterConfig,
}

impl RandomInstance {
    /// Even seeds use cosine similarity, odd seeds raw dot products.
    pub fn generate(seed: u64) -> Result<Self> {
        use rand::seq::index::sample;
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};

        let mut rng = keyed_rng(&[tag::GRADCHECK, seed, 1]);
        let modalities = rng.random_range(2..=3usize);
        let mut space = LabelSpace::new();
        for m in 0..modalities {
            let id = space.register_modality(&format!("m{m}"))?;
            let size = rng.random_range(1..=4usize);
            let labels: Vec<String> = (0..size).map(|i| format!("m{m}_l{i}")).collect();
            space.add_labels(id, &labels)?;
        }
        let d = rng.random_range(2..=16usize);
        let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let pools = (0..modalities)
            .map(|_| {
                let data = (0..space.len() * d).map(|_| normal(&mut rng)).collect();
                Matrix::from_vec(space.len(), d, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut batches = Vec::with_capacity(modalities);
        for m in space.modalities().collect::<Vec<_>>() {
            let block = space.block_range(m)?;
            let b = rng.random_range(1..=8usize);
            let mut rows = Vec::with_capacity(b);
            let mut positives = Vec::with_capacity(b);
            for _ in 0..b {
                let mut row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let n = norm(&row);
                row.iter_mut().for_each(|v| *v /= n);
                rows.push(row);
                let k = rng.random_range(1..=block.len().min(2));
                let mut pos: Vec<usize> = sample(&mut rng, block.len(), k)
                    .into_iter()
                    .map(|i| block.start + i)
                    .collect();
                pos.sort_unstable();
                positives.push(pos);
            }
            batches.push(IntraBatch {
                modality: m,
                embeddings: Matrix::from_rows(&rows)?,
                positives,
            });
        }
        let weak = ModalityId(rng.random_range(0..modalities as u32));
        let inter = InterConfig {
            weak,
            strong: space.modalities().filter(|&m| m != weak).collect(),
            tau: rng.random_range(0.1..1.0),
            direction: if rng.random_bool(0.5) { Direction::Uni } else { Direction::Bi },
        };
        Ok(Self {
            space,
            batches,
            pools,
            margin: 0.2,
            mode: if seed.is_multiple_of(2) {
                SimilarityMode::Cosine
            } else {
                SimilarityMode::Dot
            },
            inter,
        })
    }

    pub fn objective(&self, lambda1: f64, lambda2: f64) -> Objective<'_> {
        Objective {
            space: &self.space,
            batches: &self.batches,
            margin: self.margin,
            mode: self.mode,
            inter: Some(self.inter.clone()),
            lambda1,
            lambda2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_normal;

    fn space(sizes: &[(&str, usize)]) -> LabelSpace {
        let mut s = LabelSpace::new();
        for (name, n) in sizes {
            let id = s.register_modality(name).unwrap();
            let labels: Vec<String> = (0..*n).map(|i| format!("{name}{i}")).collect();
            s.add_labels(id, &labels).unwrap();
        }
        s
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let data = (0..rows * cols).map(|i| keyed_normal(&[seed, i as u64])).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut m = random_matrix(rows, cols, seed);
        for i in 0..rows {
            crate::matrix::normalize_in_place(m.row_mut(i));
        }
        m
    }

    #[test]
    fn similarity_examples() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let pool = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let s = similarity(&h, &pool, SimilarityMode::Dot).unwrap();
        assert_eq!(s.row(0), &[0.6, 0.0]);

        let pool = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let h = Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let s = similarity(&h, &pool, SimilarityMode::Cosine).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(s.get(1, 1), 0.0);

        let zero = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(similarity(&h, &zero, SimilarityMode::Cosine).is_err());
        assert!(similarity(&h, &Matrix::zeros(1, 3), SimilarityMode::Dot).is_err());
    }

    #[test]
    fn ranking_examples() {
        let sims = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (l, g) = ranking_loss(&[vec![0]], &sims, 0.2).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));

        let sims = Matrix::from_rows(&[vec![0.5, 0.3, 0.6]]).unwrap();
        let (l, g) = ranking_loss(&[vec![0]], &sims, 0.2).unwrap();
        assert!((l - 0.3).abs() < 1e-12, "{l}");
        assert_eq!(g.row(0), &[-1.0, 0.0, 1.0]);

        assert!(ranking_loss(&[vec![0]], &sims, 0.0).is_err());
        assert!(ranking_loss(&[vec![]], &sims, 0.2).is_err());
    }

    #[test]
    fn ranking_gradient_is_scaled_by_batch() {
        let sims = Matrix::from_rows(&[vec![0.0, 0.1], vec![0.0, 0.1]]).unwrap();
        let (l, g) = ranking_loss(&[vec![0], vec![0]], &sims, 0.2).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
        assert_eq!(g.row(1), &[-0.5, 0.5]);
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let s = space(&[("video", 2), ("image", 2)]);
        let pools = vec![Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap(); 2];
        let batches = vec![
            IntraBatch {
                modality: ModalityId(0),
                embeddings: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
                positives: vec![vec![0]],
            },
            IntraBatch {
                modality: ModalityId(1),
                embeddings: Matrix::from_rows(&[vec![0.0, -1.0]]).unwrap(),
                positives: vec![vec![3]],
            },
        ];
        let t = intra_loss(&s, &batches, &pools, 0.2, SimilarityMode::Cosine).unwrap();
        assert_eq!(t.total, 0.0);
        assert!(t.grads.iter().all(|g| g.max_abs() == 0.0));

        let single = intra_loss(&s, &batches[..1], &pools, 1.5, SimilarityMode::Cosine).unwrap();
        let (direct, _) = ranking_loss(
            &batches[0].positives,
            &similarity(&batches[0].embeddings, &pools[0], SimilarityMode::Cosine).unwrap(),
            1.5,
        )
        .unwrap();
        assert_eq!(single.total, direct);
        assert_eq!(single.per_modality[1], 0.0);
    }

    #[test]
    fn batch_validation() {
        let s = space(&[("video", 2), ("image", 2)]);
        let pools = vec![random_matrix(4, 3, 1), random_matrix(4, 3, 2)];
        let outside = IntraBatch {
            modality: ModalityId(0),
            embeddings: unit_rows(1, 3, 3),
            positives: vec![vec![2]],
        };
        assert!(intra_loss(&s, &[outside], &pools, 0.2, SimilarityMode::Cosine).is_err());
    }

    #[test]
    fn uniform_similarities_give_ln2() {
        let s = space(&[("video", 1), ("audio", 1)]);
        let same = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let pools = vec![same.clone(), same];
        let cfg = InterConfig {
            weak: ModalityId(0),
            strong: vec![ModalityId(1)],
            tau: 0.07,
            direction: Direction::Uni,
        };
        let t = inter_loss(&s, &pools, &cfg).unwrap();
        assert!((t.total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matched_pools_at_low_temperature_give_zero_loss() {
        let s = space(&[("video", 3), ("audio", 3)]);
        let basis = unit_rows(6, 8, 5);
        let pools = vec![basis.clone(), basis];
        let cfg = InterConfig {
            weak: ModalityId(0),
            strong: vec![ModalityId(1)],
            tau: 1e-3,
            direction: Direction::Uni,
        };
        assert!(inter_loss(&s, &pools, &cfg).unwrap().total < 1e-9);
    }

    #[test]
    fn inter_config_errors() {
        let s = space(&[("video", 2), ("audio", 2)]);
        let pools = vec![random_matrix(4, 3, 1), random_matrix(4, 3, 2)];
        let mut cfg = InterConfig {
            weak: ModalityId(0),
            strong: vec![ModalityId(0)],
            tau: 0.07,
            direction: Direction::Uni,
        };
        assert!(inter_loss(&s, &pools, &cfg).is_err());
        cfg.strong = vec![ModalityId(1)];
        cfg.tau = 0.0;
        assert!(inter_loss(&s, &pools, &cfg).is_err());
        let one = space(&[("video", 2)]);
        cfg.tau = 0.07;
        assert!(inter_loss(&one, &pools[..1], &cfg).is_err());
    }

    #[test]
    fn uni_direction_blocks_strong_gradients() {
        let s = space(&[("video", 3), ("audio", 2), ("image", 3)]);
        let pools: Vec<Matrix> = (0..3).map(|m| random_matrix(8, 5, 10 + m)).collect();
        let mut cfg = InterConfig {
            weak: ModalityId(0),
            strong: vec![ModalityId(1), ModalityId(2)],
            tau: 0.5,
            direction: Direction::Uni,
        };
        let t = inter_loss(&s, &pools, &cfg).unwrap();
        assert!(t.grads[1].as_slice().iter().all(|v| v.to_bits() == 0));
        assert!(t.grads[2].as_slice().iter().all(|v| v.to_bits() == 0));
        assert!(t.grads[0].max_abs() > 0.0);
        cfg.direction = Direction::Bi;
        let t = inter_loss(&s, &pools, &cfg).unwrap();
        assert!(t.grads[1].max_abs() > 0.0 && t.grads[2].max_abs() > 0.0);
    }

    #[test]
    fn weights() {
        let s = space(&[("video", 2), ("audio", 2)]);
        let pools = vec![random_matrix(4, 3, 1), random_matrix(4, 3, 2)];
        let batches = vec![IntraBatch {
            modality: ModalityId(0),
            embeddings: unit_rows(2, 3, 9),
            positives: vec![vec![0], vec![1]],
        }];
        let inter = Some(InterConfig {
            weak: ModalityId(0),
            strong: vec![ModalityId(1)],
            tau: 0.07,
            direction: Direction::Uni,
        });
        let obj = |l1, l2| Objective {
            space: &s,
            batches: &batches,
            margin: 0.2,
            mode: SimilarityMode::Cosine,
            inter: inter.clone(),
            lambda1: l1,
            lambda2: l2,
        };
        let zero = obj(0.0, 0.0).evaluate(&pools, None).unwrap();
        assert_eq!(zero.total, 0.0);
        assert!(zero.grads.iter().all(|g| g.max_abs() == 0.0));

        let intra_only = obj(1.0, 0.0).evaluate(&pools, None).unwrap();
        let direct = intra_loss(&s, &batches, &pools, 0.2, SimilarityMode::Cosine).unwrap();
        assert_eq!(intra_only.total, direct.total);
        assert_eq!(intra_only.grads, direct.grads);

        let both = obj(1.0, 1.0).evaluate(&pools, None).unwrap();
        assert!((both.total - (both.intra + both.inter)).abs() < 1e-15);

        let frozen = vec![vec![true, false, false, false], vec![false; 4]];
        let masked = obj(1.0, 1.0).evaluate(&pools, Some(&frozen)).unwrap();
        assert!(masked.grads[0].row(0).iter().all(|&v| v == 0.0));
        assert_eq!(masked.grads[0].row(1), both.grads[0].row(1));

        assert!(total_loss(None, None, -1.0, 0.0, &[], None).is_err());
    }

    #[test]
    fn gradient_check_small_instance() {
        let s = space(&[("video", 2), ("audio", 2), ("image", 2)]);
        let pools: Vec<Matrix> = (0..3).map(|m| random_matrix(6, 8, 100 + m)).collect();
        let batches: Vec<IntraBatch> = (0..3)
            .map(|m| {
                let range = s.block_range(ModalityId(m)).unwrap();
                IntraBatch {
                    modality: ModalityId(m),
                    embeddings: unit_rows(4, 8, 200 + u64::from(m)),
                    positives: (0..4).map(|k| vec![range.start + k % 2]).collect(),
                }
            })
            .collect();
        for mode in [SimilarityMode::Cosine, SimilarityMode::Dot] {
            let obj = Objective {
                space: &s,
                batches: &batches,
                margin: 0.2,
                mode,
                inter: Some(InterConfig {
                    weak: ModalityId(0),
                    strong: vec![ModalityId(1), ModalityId(2)],
                    tau: 0.3,
                    direction: Direction::Uni,
                }),
                lambda1: 1.0,
                lambda2: 1.0,
            };
            let r = finite_difference_check(&obj, &pools, 1e-5, 1e-4, CoordSelection::All).unwrap();
            assert!(r.passed, "{mode:?}: {r:?}");
            assert!(r.checked > 100);
        }
    }

    #[test]
    fn random_instances_pass_gradient_check() {
        for seed in 0..6 {
            let inst = RandomInstance::generate(seed).unwrap();
            assert!(inst.space.len() <= 12 && inst.pools[0].cols() <= 16);
            assert!(inst.batches.iter().all(|b| (1..=8).contains(&b.len())));
            for (l1, l2) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                let r = finite_difference_check(&inst.objective(l1, l2), &inst.pools, 1e-5, 1e-4, CoordSelection::All).unwrap();
                assert!(r.passed, "seed {seed} ({l1}, {l2}): {r:?}");
            }
        }
        let a = RandomInstance::generate(3).unwrap();
        let b = RandomInstance::generate(3).unwrap();
        assert_eq!(a.pools, b.pools);
    }

    #[test]
    fn gradient_check_zero_gradient_and_kinks() {
        let s = space(&[("video", 2)]);
        let pool = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let batch = IntraBatch {
            modality: ModalityId(0),
            embeddings: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            positives: vec![vec![0]],
        };
        let obj = Objective {
            space: &s,
            batches: std::slice::from_ref(&batch),
            margin: 0.2,
            mode: SimilarityMode::Dot,
            inter: None,
            lambda1: 1.0,
            lambda2: 0.0,
        };
        let r = finite_difference_check(&obj, std::slice::from_ref(&pool), 1e-5, 1e-4, CoordSelection::All).unwrap();
        assert!(r.max_abs_analytic < 1e-8 && r.max_abs_numeric < 1e-8);
        assert!(r.passed && r.excluded.is_empty());

        // margin exactly met: s0 - s1 = 0.2
        let kink = Matrix::from_rows(&[vec![0.6, 0.0], vec![0.4, 0.0]]).unwrap();
        let r = finite_difference_check(&obj, std::slice::from_ref(&kink), 1e-5, 1e-4, CoordSelection::All).unwrap();
        assert!(r.excluded.contains(&Coordinate { pool: 0, row: 0, col: 0 }));
        assert!(r.excluded.contains(&Coordinate { pool: 0, row: 1, col: 0 }));
    }
}
