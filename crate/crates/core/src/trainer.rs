//! The optimization loop.
//!
//! Each step draws one batch per trained modality, evaluates the weighted
//! objective on the full pools and applies SGD or Adam to unfrozen rows.
//! Parameters and optimizer moments are stored as `f32`; arithmetic runs in
//! `f64`. Every random choice is keyed by (seed, step), so a run resumed from
//! a checkpoint reproduces the uninterrupted run bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::CaptionRecord;
use crate::embedding::EmbeddingRecord;
use crate::error::{CptError, Result};
use crate::eval::{evaluate, Classifier, LabeledItems};
use crate::io::{expect_eof, read_f32s, read_header, read_u32, read_u64, write_f32s, write_header};
use crate::label_space::{LabelManifest, LabelSpace, ModalityId, Remap};
use crate::matrix::Matrix;
use crate::objectives::{Direction, GradientBundle, InterConfig, IntraBatch, Objective, SimilarityMode};
use crate::prompt_pool::{PoolInitConfig, PromptPool};
use crate::rng::{keyed_rng, tag};

pub const OPTIM_MAGIC: [u8; 4] = *b"CPTO";
pub const OPTIM_VERSION: u32 = 1;
const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the weak modality is chosen: `adaptive` or `fixed:<name>`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeakSelection {
    Fixed(String),
    #[default]
    Adaptive,
}

impl FromStr for WeakSelection {
    type Err = CptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(WeakSelection::Adaptive),
            _ => match s.strip_prefix("fixed:") {
                Some(name) if !name.is_empty() => Ok(WeakSelection::Fixed(name.to_owned())),
                _ => Err(CptError::InvalidConfig(format!(
                    "weak selection must be `adaptive` or `fixed:<modality>`, got `{s}`"
                ))),
            },
        }
    }
}

impl TryFrom<String> for WeakSelection {
    type Error = CptError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeakSelection> for String {
    fn from(w: WeakSelection) -> String {
        w.to_string()
    }
}

impl fmt::Display for WeakSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeakSelection::Adaptive => f.write_str("adaptive"),
            WeakSelection::Fixed(name) => write!(f, "fixed:{name}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Target step count; a resumed run continues until the state reaches it.
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub tau: f64,
    /// Keys pool initialization and batch shuffling.
    pub seed: u64,
    pub eval_every: u64,
    pub weak_selection: WeakSelection,
    pub direction: Direction,
    pub mode: SimilarityMode,
    pub init_mean: f64,
    pub init_std: f64,
    /// Restricts batching to these modalities; `None` trains all of them.
    pub train_modalities: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            optimizer: OptimizerKind::default(),
            lr: 1e-3,
            lambda1: 1.0,
            lambda2: 1.0,
            margin: 0.2,
            tau: 0.07,
            seed: 0,
            eval_every: 500,
            weak_selection: WeakSelection::Adaptive,
            direction: Direction::Uni,
            mode: SimilarityMode::Cosine,
            init_mean: 0.0,
            init_std: 0.02,
            train_modalities: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CptError::InvalidConfig(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be > 0, got {}", self.margin));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {l}"));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad(format!("invalid adam parameters ({beta1}, {beta2}, {eps})"));
            }
        }
        Ok(())
    }

    pub fn pool_init(&self) -> PoolInitConfig {
        PoolInitConfig::gaussian(self.init_mean, self.init_std, self.seed)
    }

    fn trained(&self, space: &LabelSpace) -> Result<Vec<ModalityId>> {
        match &self.train_modalities {
            None => Ok(space.modalities().collect()),
            Some(names) => names.iter().map(|n| space.modality_by_name(n)).collect(),
        }
    }
}

/// First and second moment estimates for one pool, same shape as its params.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Validation metrics for one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub top1: f64,
    pub top5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_intra")]
    pub intra: f64,
    #[serde(rename = "L_inter")]
    pub inter: f64,
    /// Intra-modal loss per modality name.
    pub per_modality: BTreeMap<String, f64>,
    /// Inter-modal loss per strong modality name.
    #[serde(default)]
    pub per_strong: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<BTreeMap<String, ValMetrics>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub space: LabelSpace,
    /// Indexed by modality id.
    pub pools: Vec<PromptPool>,
    pub moments: Vec<Moments>,
    pub step: u64,
    pub weak: Option<ModalityId>,
    pub log: Vec<StepRecord>,
}

impl TrainState {
    /// Gaussian-initialized pools for every modality.
    pub fn new(space: &LabelSpace, cfg: &TrainConfig, dim: usize) -> Result<Self> {
        let init = cfg.pool_init();
        let pools = space
            .modalities()
            .map(|m| PromptPool::init(space, m, &init, dim))
            .collect::<Result<Vec<_>>>()?;
        Self::from_pools(space, pools)
    }

    /// Starts from caller-built pools, e.g. initialized from class embeddings.
    pub fn from_pools(space: &LabelSpace, pools: Vec<PromptPool>) -> Result<Self> {
        if pools.len() != space.modality_count() {
            return Err(CptError::DimensionMismatch(format!(
                "{} pools for {} modalities",
                pools.len(),
                space.modality_count()
            )));
        }
        let dim = pools.first().map_or(0, PromptPool::dim);
        for (i, p) in pools.iter().enumerate() {
            if p.modality().index() != i || p.rows() != space.len() || p.dim() != dim {
                return Err(CptError::DimensionMismatch(format!(
                    "pool {i} (modality {}) is {}x{}, expected {}x{dim}",
                    p.modality(),
                    p.rows(),
                    p.dim(),
                    space.len()
                )));
            }
        }
        let moments = pools.iter().map(|p| Moments::zeros(p.params().len())).collect();
        Ok(Self {
            space: space.clone(),
            pools,
            moments,
            step: 0,
            weak: None,
            log: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.pools.first().map_or(0, PromptPool::dim)
    }

    fn matrices(&self) -> Vec<Matrix> {
        self.pools.iter().map(PromptPool::to_matrix).collect()
    }
}

/// Embedded training captions of one modality.
#[derive(Clone, Debug, Default)]
pub struct ModalityCorpus {
    pub ids: Vec<u64>,
    pub embeddings: Matrix,
    pub positives: Vec<Vec<usize>>,
}

impl ModalityCorpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Training captions grouped by modality id.
#[derive(Clone, Debug)]
pub struct TrainingCorpus {
    pub modalities: Vec<ModalityCorpus>,
}

impl TrainingCorpus {
    /// Joins captions with their embeddings by caption id, keeping caption order.
    pub fn from_records(space: &LabelSpace, captions: &[CaptionRecord], embeddings: &[EmbeddingRecord]) -> Result<Self> {
        let by_id: HashMap<u64, &EmbeddingRecord> = embeddings.iter().map(|e| (e.ref_id, e)).collect();
        if by_id.len() != embeddings.len() {
            return Err(CptError::Malformed("duplicate ref_id in embeddings".into()));
        }
        let dim = embeddings.first().map_or(0, |e| e.vector.len());
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); space.modality_count()];
        let mut modalities: Vec<ModalityCorpus> = vec![ModalityCorpus::default(); space.modality_count()];
        for c in captions {
            let e = by_id
                .get(&c.caption_id)
                .ok_or_else(|| CptError::Malformed(format!("caption {} has no embedding", c.caption_id)))?;
            if e.modality != c.modality {
                return Err(CptError::Malformed(format!(
                    "caption {} is modality {}, its embedding says {}",
                    c.caption_id, c.modality, e.modality
                )));
            }
            if e.vector.len() != dim {
                return Err(CptError::DimensionMismatch(format!(
                    "embedding {} has {} dims",
                    e.ref_id,
                    e.vector.len()
                )));
            }
            let m = space.block_range(c.modality).map(|_| c.modality.index())?;
            modalities[m].ids.push(c.caption_id);
            modalities[m].positives.push(c.labels.clone());
            rows[m].push(e.to_f64());
        }
        for (mc, r) in modalities.iter_mut().zip(rows) {
            mc.embeddings = if r.is_empty() {
                Matrix::zeros(0, dim)
            } else {
                Matrix::from_rows(&r)?
            };
        }
        Ok(Self { modalities })
    }

    /// Rewrites label indices after a label-space extension.
    pub fn remap(&mut self, remap: &Remap) {
        for mc in &mut self.modalities {
            for pos in &mut mc.positives {
                pos.iter_mut().for_each(|l| *l = remap.get(*l));
            }
        }
    }
}

/// One batch per listed modality for `step`. Each modality walks a seeded
/// permutation of its captions, reshuffled every epoch; the last batch of an
/// epoch may be short.
pub fn make_batches(
    corpus: &TrainingCorpus,
    modalities: &[ModalityId],
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<IntraBatch>> {
    if batch_size < 1 {
        return Err(CptError::InvalidConfig("batch_size must be >= 1".into()));
    }
    modalities
        .iter()
        .map(|&m| {
            let mc = corpus
                .modalities
                .get(m.index())
                .ok_or_else(|| CptError::UnknownModality(m.to_string()))?;
            let n = mc.len();
            if n == 0 {
                return Err(CptError::InvalidConfig(format!("modality {m} has no training captions")));
            }
            let per_epoch = n.div_ceil(batch_size) as u64;
            let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut keyed_rng(&[tag::SHUFFLE, seed, u64::from(m.0), epoch]));
            let picked = &order[pos * batch_size..((pos + 1) * batch_size).min(n)];
            let rows: Vec<Vec<f64>> = picked.iter().map(|&i| mc.embeddings.row(i).to_vec()).collect();
            Ok(IntraBatch {
                modality: m,
                embeddings: Matrix::from_rows(&rows)?,
                positives: picked.iter().map(|&i| mc.positives[i].clone()).collect(),
            })
        })
        .collect()
}

fn inter_config(state: &TrainState, cfg: &TrainConfig) -> Option<InterConfig> {
    let weak = state.weak?;
    let strong: Vec<ModalityId> = state.space.modalities().filter(|&m| m != weak).collect();
    (!strong.is_empty()).then_some(InterConfig {
        weak,
        strong,
        tau: cfg.tau,
        direction: cfg.direction,
    })
}

/// Losses and gradients of the current state on `batches`, frozen rows zeroed.
pub fn evaluate_objective(state: &TrainState, batches: &[IntraBatch], cfg: &TrainConfig) -> Result<GradientBundle> {
    let objective = Objective {
        space: &state.space,
        batches,
        margin: cfg.margin,
        mode: cfg.mode,
        inter: inter_config(state, cfg),
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let frozen: Vec<Vec<bool>> = state.pools.iter().map(|p| p.frozen().to_vec()).collect();
    objective.evaluate(&state.matrices(), Some(&frozen))
}

/// One optimizer update on unfrozen rows; appends a record to the log.
pub fn train_step(state: &mut TrainState, batches: &[IntraBatch], cfg: &TrainConfig) -> Result<()> {
    let bundle = evaluate_objective(state, batches, cfg)?;
    let next = state.step + 1;
    if !bundle.total.is_finite() {
        return Err(CptError::NonFinite(format!("loss {} at step {next}", bundle.total)));
    }
    if let Some(m) = bundle.grads.iter().position(|g| !g.is_finite()) {
        return Err(CptError::NonFinite(format!("gradient of pool {m} at step {next}")));
    }
    for ((pool, moments), grad) in state.pools.iter_mut().zip(&mut state.moments).zip(&bundle.grads) {
        apply_update(pool, moments, grad, cfg, next);
        if !pool.is_finite() {
            return Err(CptError::NonFinite(format!("pool {} after step {next}", pool.modality())));
        }
    }
    state.step = next;
    let name = |m: ModalityId| state.space.modality_name(m).map(str::to_owned);
    let per_modality = state
        .space
        .modalities()
        .map(|m| Ok((name(m)?, bundle.intra_per_modality[m.index()])))
        .collect::<Result<_>>()?;
    let per_strong = bundle
        .inter_per_strong
        .iter()
        .map(|&(m, l)| Ok((name(m)?, l)))
        .collect::<Result<_>>()?;
    state.log.push(StepRecord {
        step: next,
        total: bundle.total,
        intra: bundle.intra,
        inter: bundle.inter,
        per_modality,
        per_strong,
        weak: state.weak.map(name).transpose()?,
        val: None,
    });
    Ok(())
}

fn apply_update(pool: &mut PromptPool, moments: &mut Moments, grad: &Matrix, cfg: &TrainConfig, t: u64) {
    let dim = pool.dim();
    let frozen = pool.frozen().to_vec();
    let params = pool.params_mut();
    let g = grad.as_slice();
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for row in (0..frozen.len()).filter(|&r| !frozen[r]) {
                for i in row * dim..(row + 1) * dim {
                    params[i] = (f64::from(params[i]) - cfg.lr * g[i]) as f32;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powf(t as f64);
            let c2 = 1.0 - beta2.powf(t as f64);
            for row in (0..frozen.len()).filter(|&r| !frozen[r]) {
                for i in row * dim..(row + 1) * dim {
                    let m = beta1 * f64::from(moments.m[i]) + (1.0 - beta1) * g[i];
                    let v = beta2 * f64::from(moments.v[i]) + (1.0 - beta2) * g[i] * g[i];
                    moments.m[i] = m as f32;
                    moments.v[i] = v as f32;
                    let step = cfg.lr * (m / c1) / ((v / c2).sqrt() + eps);
                    params[i] = (f64::from(params[i]) - step) as f32;
                }
            }
        }
    }
}

/// Lowest top-1 wins; ties go to the lowest modality id.
pub fn select_weak_modality(space: &LabelSpace, top1: &BTreeMap<ModalityId, f64>) -> Result<ModalityId> {
    let mut best: Option<(ModalityId, f64)> = None;
    for m in space.modalities() {
        let v = *top1.get(&m).ok_or_else(|| {
            CptError::MissingMetric(format!(
                "no validation top-1 for modality {}",
                space.modality_name(m).unwrap_or("?")
            ))
        })?;
        if v.is_nan() {
            return Err(CptError::MissingMetric(format!("top-1 for modality {m} is NaN")));
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((m, v));
        }
    }
    best.map(|(m, _)| m)
        .ok_or_else(|| CptError::MissingMetric("label space has no modalities".into()))
}

/// Block-restricted metrics of each modality's own pool on its validation items.
pub fn validate(state: &TrainState, validation: &[LabeledItems]) -> Result<BTreeMap<ModalityId, ValMetrics>> {
    let mut out = BTreeMap::new();
    for items in validation {
        let pool = state
            .pools
            .get(items.modality.index())
            .ok_or_else(|| CptError::UnknownModality(items.modality.to_string()))?;
        let r = evaluate(&Classifier::new(pool)?, &state.space, items)?;
        out.insert(
            items.modality,
            ValMetrics {
                top1: r.top1,
                top5: r.top5,
                map: r.map,
            },
        );
    }
    Ok(out)
}

fn resolve_weak(state: &mut TrainState, cfg: &TrainConfig, val: Option<&BTreeMap<ModalityId, ValMetrics>>) -> Result<()> {
    if state.space.modality_count() < 2 {
        state.weak = state.space.modalities().next();
        return Ok(());
    }
    match &cfg.weak_selection {
        WeakSelection::Fixed(name) => state.weak = Some(state.space.modality_by_name(name)?),
        WeakSelection::Adaptive => {
            if let Some(val) = val {
                let top1 = val.iter().map(|(&m, v)| (m, v.top1)).collect();
                state.weak = Some(select_weak_modality(&state.space, &top1)?);
            }
        }
    }
    Ok(())
}

fn named(space: &LabelSpace, val: &BTreeMap<ModalityId, ValMetrics>) -> Result<BTreeMap<String, ValMetrics>> {
    val.iter()
        .map(|(&m, v)| Ok((space.modality_name(m)?.to_owned(), *v)))
        .collect()
}

/// Trains until `state.step == cfg.steps`, validating (and, in adaptive mode,
/// reselecting the weak modality) every `eval_every` steps. When
/// `checkpoint_dir` is given a checkpoint is written at each validation step
/// and at the end, into `step-NNNNNN` subdirectories.
pub fn run(
    mut state: TrainState,
    cfg: &TrainConfig,
    corpus: &TrainingCorpus,
    validation: &[LabeledItems],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    let trained = cfg.trained(&state.space)?;
    let needs_val = matches!(cfg.weak_selection, WeakSelection::Adaptive) && state.space.modality_count() > 1;
    if state.weak.is_none() || matches!(cfg.weak_selection, WeakSelection::Fixed(_)) {
        let val = if needs_val && state.step < cfg.steps {
            Some(validate(&state, validation)?)
        } else {
            None
        };
        resolve_weak(&mut state, cfg, val.as_ref())?;
    }
    while state.step < cfg.steps {
        let batches = make_batches(corpus, &trained, cfg.batch_size, cfg.seed, state.step)?;
        train_step(&mut state, &batches, cfg)?;
        let at_eval = state.step.is_multiple_of(cfg.eval_every);
        if at_eval && !validation.is_empty() {
            let val = validate(&state, validation)?;
            let record = named(&state.space, &val)?;
            if let Some(last) = state.log.last_mut() {
                last.val = Some(record);
            }
            if needs_val {
                resolve_weak(&mut state, cfg, Some(&val))?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            if at_eval || state.step == cfg.steps {
                save_checkpoint(&dir.join(format!("step-{:06}", state.step)), &state, cfg)?;
            }
        }
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinualMode {
    Continue,
    FreezeOld,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtensionRequest {
    /// New labels appended to an existing modality's block.
    Labels { modality: String, names: Vec<String> },
    /// A new modality with its own labels, placed after all existing blocks.
    Modality { name: String, labels: Vec<String> },
}

/// Applies one extension request; see [`continual_extend_to`].
pub fn continual_extend(
    state: &TrainState,
    request: &ExtensionRequest,
    mode: ContinualMode,
    cfg: &TrainConfig,
) -> Result<(TrainState, Remap)> {
    let mut space = state.space.clone();
    match request {
        ExtensionRequest::Labels { modality, names } => {
            if names.is_empty() {
                return Err(CptError::InvalidConfig(format!("no labels to add to `{modality}`")));
            }
            let m = space.modality_by_name(modality)?;
            space.add_labels(m, names)?;
        }
        ExtensionRequest::Modality { name, labels } => {
            if labels.is_empty() {
                return Err(CptError::EmptyBlock(name.clone()));
            }
            let m = space.register_modality(name)?;
            space.add_labels(m, labels)?;
        }
    }
    continual_extend_to(state, &space, mode, cfg)
}

/// Extends the state to `target`, which must extend the current space
/// block by block. Surviving rows keep their bits and moments; fresh rows
/// are drawn from `cfg`. In `FreezeOld` mode every pre-existing row of the
/// existing pools is frozen and its moments zeroed. Returns the new state
/// and the old-to-new index map.
pub fn continual_extend_to(
    state: &TrainState,
    target: &LabelSpace,
    mode: ContinualMode,
    cfg: &TrainConfig,
) -> Result<(TrainState, Remap)> {
    if !target.extends(&state.space) {
        return Err(CptError::InvalidRemap(
            "target label space does not extend the trained one".into(),
        ));
    }
    if let Some(m) = target
        .modalities()
        .find(|&m| target.block_range(m).is_ok_and(|r| r.is_empty()))
    {
        return Err(CptError::EmptyBlock(target.modality_name(m)?.to_owned()));
    }
    let map = (0..state.space.len())
        .map(|g| {
            let (m, name) = state.space.label(g).expect("index in range");
            target.global_index(m, name)
        })
        .collect::<Result<Vec<_>>>()?;
    let remap = Remap::new(map, target.len());
    let fresh_rows = target.len() - state.space.len();
    let init = cfg.pool_init();
    let freeze_old = mode == ContinualMode::FreezeOld;
    let mut pools = Vec::with_capacity(target.modality_count());
    let mut moments = Vec::with_capacity(target.modality_count());
    for (pool, mom) in state.pools.iter().zip(&state.moments) {
        let extended = pool.extend(&remap, fresh_rows, &init, freeze_old)?;
        let dim = pool.dim();
        let mut moved = Moments::zeros(extended.params().len());
        for old in 0..pool.rows() {
            let new = remap.get(old);
            if extended.frozen()[new] {
                continue;
            }
            moved.m[new * dim..(new + 1) * dim].copy_from_slice(&mom.m[old * dim..(old + 1) * dim]);
            moved.v[new * dim..(new + 1) * dim].copy_from_slice(&mom.v[old * dim..(old + 1) * dim]);
        }
        pools.push(extended);
        moments.push(moved);
    }
    for m in target.modalities().skip(state.pools.len()) {
        let pool = PromptPool::init(target, m, &init, state.dim())?;
        moments.push(Moments::zeros(pool.params().len()));
        pools.push(pool);
    }
    Ok((
        TrainState {
            space: target.clone(),
            pools,
            moments,
            step: state.step,
            weak: state.weak,
            log: state.log.clone(),
        },
        remap,
    ))
}

/// CPTO layout: magic, u32 version, u64 step, u32 pool count, then per pool
/// u32 modality, u32 N, u32 d, N*d f32 first moments, N*d f32 second moments.
pub fn write_optimizer_state<W: Write>(w: &mut W, state: &TrainState) -> Result<()> {
    write_header(w, OPTIM_MAGIC, OPTIM_VERSION)?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&(state.pools.len() as u32).to_le_bytes())?;
    for (pool, mom) in state.pools.iter().zip(&state.moments) {
        for v in [pool.modality().0, pool.rows() as u32, pool.dim() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f32s(w, &mom.m)?;
        write_f32s(w, &mom.v)?;
    }
    Ok(())
}

/// Returns the step counter and per-pool (modality, N, d, moments).
/// Moments of one pool as stored: modality, rows, dimension.
pub type PoolMoments = (ModalityId, usize, usize, Moments);

pub fn read_optimizer_state<R: Read>(r: &mut R) -> Result<(u64, Vec<PoolMoments>)> {
    read_header(r, OPTIM_MAGIC, OPTIM_VERSION)?;
    let step = read_u64(r, "step")?;
    let count = read_u32(r, "pool count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let modality = ModalityId(read_u32(r, "modality id")?);
        let n = read_u32(r, "row count")? as usize;
        let d = read_u32(r, "dimension")? as usize;
        let m = read_f32s(r, n * d, "first moments")?;
        let v = read_f32s(r, n * d, "second moments")?;
        out.push((modality, n, d, Moments { m, v }));
    }
    expect_eof(r, "optimizer state")?;
    Ok((step, out))
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u32,
    step: u64,
    weak: Option<String>,
    labels: LabelManifest,
    config: TrainConfig,
}

/// Writes pools (`pool_<id>.cptp`), optimizer moments (`optim.cpto`), the
/// label space and config (`state.json`) and the metrics log (`metrics.jsonl`).
pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    for pool in &state.pools {
        let mut w = BufWriter::new(File::create(dir.join(format!("pool_{}.cptp", pool.modality().0)))?);
        pool.write_to(&mut w)?;
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(dir.join("optim.cpto"))?);
    write_optimizer_state(&mut w, state)?;
    w.flush()?;
    let file = StateFile {
        version: STATE_VERSION,
        step: state.step,
        weak: state
            .weak
            .map(|m| state.space.modality_name(m).map(str::to_owned))
            .transpose()?,
        labels: state.space.to_manifest(),
        config: cfg.clone(),
    };
    fs::write(dir.join("state.json"), serde_json::to_string_pretty(&file)?)?;
    let mut w = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    write_metrics(&mut w, &state.log)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let file: StateFile = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
    if file.version != STATE_VERSION {
        return Err(CptError::VersionMismatch {
            expected: STATE_VERSION,
            found: file.version,
        });
    }
    let space = LabelSpace::from_manifest(&file.labels)?;
    let pools = space
        .modalities()
        .map(|m| {
            let mut r = BufReader::new(File::open(dir.join(format!("pool_{}.cptp", m.0)))?);
            let pool = PromptPool::read_from(&mut r)?;
            if pool.modality() != m {
                return Err(CptError::Malformed(format!(
                    "pool_{}.cptp holds modality {}",
                    m.0,
                    pool.modality()
                )));
            }
            Ok(pool)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::from_pools(&space, pools)?;
    let (step, moments) = read_optimizer_state(&mut BufReader::new(File::open(dir.join("optim.cpto"))?))?;
    if step != file.step || moments.len() != state.pools.len() {
        return Err(CptError::Malformed("optimizer state does not match state.json".into()));
    }
    for ((pool, slot), (m, n, d, mom)) in state.pools.iter().zip(state.moments.iter_mut()).zip(moments) {
        if m != pool.modality() || n != pool.rows() || d != pool.dim() {
            return Err(CptError::Malformed(format!(
                "optimizer moments for modality {m} do not match the pool"
            )));
        }
        *slot = mom;
    }
    state.step = file.step;
    state.weak = file.weak.map(|n| space.modality_by_name(&n)).transpose()?;
    state.log = read_metrics(BufReader::new(File::open(dir.join("metrics.jsonl"))?))?;
    Ok((state, file.config))
}

pub fn write_metrics<W: Write>(w: &mut W, log: &[StepRecord]) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CptError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
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

    /// Captions whose embedding is a noisy copy of a fixed per-label direction.
    fn toy_corpus(space: &LabelSpace, per_modality: usize, dim: usize) -> TrainingCorpus {
        let modalities = space
            .modalities()
            .map(|m| {
                let block = space.block_range(m).unwrap();
                let mut rows = Vec::new();
                let mut positives = Vec::new();
                for k in 0..per_modality {
                    let label = block.start + k % block.len();
                    let row: Vec<f64> = (0..dim)
                        .map(|c| {
                            keyed_normal(&[1, label as u64, c as u64])
                                + 0.1 * keyed_normal(&[2, u64::from(m.0), k as u64, c as u64])
                        })
                        .collect();
                    rows.push(row);
                    positives.push(vec![label]);
                }
                ModalityCorpus {
                    ids: (0..per_modality as u64).map(|k| k + 1000 * u64::from(m.0)).collect(),
                    embeddings: Matrix::from_rows(&rows).unwrap(),
                    positives,
                }
            })
            .collect();
        TrainingCorpus { modalities }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 30,
            batch_size: 4,
            eval_every: 10,
            weak_selection: WeakSelection::Fixed("video".into()),
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_partition_each_epoch() {
        let s = space(&[("video", 3), ("image", 2)]);
        let corpus = toy_corpus(&s, 10, 4);
        let mods: Vec<_> = s.modalities().collect();
        for epoch in 0..3u64 {
            let mut seen = vec![Vec::new(); 2];
            for pos in 0..3 {
                let batches = make_batches(&corpus, &mods, 4, 9, epoch * 3 + pos).unwrap();
                assert_eq!(batches[0].len(), if pos == 2 { 2 } else { 4 });
                for (m, b) in batches.iter().enumerate() {
                    for r in 0..b.len() {
                        let idx = (0..10)
                            .find(|&i| corpus.modalities[m].embeddings.row(i) == b.embeddings.row(r))
                            .unwrap();
                        seen[m].push(idx);
                    }
                }
            }
            for s in &mut seen {
                s.sort_unstable();
                assert_eq!(*s, (0..10).collect::<Vec<_>>());
            }
        }
        let a = make_batches(&corpus, &mods, 4, 9, 5).unwrap();
        let b = make_batches(&corpus, &mods, 4, 9, 5).unwrap();
        assert_eq!(a[0].embeddings, b[0].embeddings);
        assert_ne!(
            make_batches(&corpus, &mods, 4, 9, 0).unwrap()[0].embeddings,
            make_batches(&corpus, &mods, 4, 9, 3).unwrap()[0].embeddings,
            "epochs are reshuffled"
        );
        let whole = make_batches(&corpus, &mods, 10, 9, 0).unwrap();
        assert_eq!(whole[0].len(), 10);
        let oversized = make_batches(&corpus, &mods, 64, 9, 7).unwrap();
        assert_eq!(oversized[0].len(), 10);
    }

    #[test]
    fn empty_modality_corpus_is_an_error() {
        let s = space(&[("video", 2), ("image", 2)]);
        let mut corpus = toy_corpus(&s, 4, 3);
        corpus.modalities[1] = ModalityCorpus {
            embeddings: Matrix::zeros(0, 3),
            ..ModalityCorpus::default()
        };
        assert!(make_batches(&corpus, &[ModalityId(0), ModalityId(1)], 2, 0, 0).is_err());
        assert!(make_batches(&corpus, &[ModalityId(0)], 2, 0, 0).is_ok());
    }

    #[test]
    fn sgd_single_hinge_step_by_hand() {
        let s = space(&[("image", 2)]);
        let pools = vec![PromptPool::from_parts(ModalityId(0), 2, vec![0.0, 0.0, 0.0, 0.0], vec![false; 2]).unwrap()];
        let mut state = TrainState::from_pools(&s, pools).unwrap();
        let h = [0.5, -0.25];
        let batch = IntraBatch {
            modality: ModalityId(0),
            embeddings: Matrix::from_rows(&[h.to_vec()]).unwrap(),
            positives: vec![vec![0]],
        };
        let c = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.5,
            mode: SimilarityMode::Dot,
            lambda2: 0.0,
            ..TrainConfig::default()
        };
        train_step(&mut state, &[batch], &c).unwrap();
        let p = state.pools[0].params();
        assert_eq!(
            p,
            &[
                (0.5 * h[0]) as f32,
                (0.5 * h[1]) as f32,
                (-0.5 * h[0]) as f32,
                (-0.5 * h[1]) as f32
            ]
        );
        assert_eq!(state.step, 1);
        assert_eq!(state.log[0].total, 0.2);
    }

    #[test]
    fn zero_weights_and_frozen_pools_leave_params_alone() {
        let s = space(&[("video", 3), ("image", 2)]);
        let corpus = toy_corpus(&s, 8, 4);
        let mut c = cfg();
        c.lambda1 = 0.0;
        c.lambda2 = 0.0;
        let mut state = TrainState::new(&s, &c, 4).unwrap();
        state.weak = Some(ModalityId(0));
        let before = state.pools.clone();
        let batches = make_batches(&corpus, &[ModalityId(0), ModalityId(1)], 4, 0, 0).unwrap();
        train_step(&mut state, &batches, &c).unwrap();
        assert_eq!(state.pools, before);

        let c = cfg();
        let mut state = TrainState::new(&s, &c, 4).unwrap();
        state.weak = Some(ModalityId(0));
        state.pools[1].freeze_all();
        let frozen = state.pools[1].clone();
        for step in 0..5 {
            let batches = make_batches(&corpus, &[ModalityId(0), ModalityId(1)], 4, 0, step).unwrap();
            train_step(&mut state, &batches, &c).unwrap();
        }
        assert_eq!(state.pools[1], frozen);
        assert!(state.moments[1].m.iter().chain(&state.moments[1].v).all(|&x| x == 0.0));
        assert_ne!(state.pools[0], TrainState::new(&s, &c, 4).unwrap().pools[0]);
    }

    #[test]
    fn weak_selection_rules() {
        let s = space(&[("video", 1), ("image", 1), ("audio", 1)]);
        let metrics = BTreeMap::from([(ModalityId(0), 0.53), (ModalityId(1), 0.65), (ModalityId(2), 0.92)]);
        assert_eq!(select_weak_modality(&s, &metrics).unwrap(), ModalityId(0));
        let equal = BTreeMap::from([(ModalityId(0), 0.5), (ModalityId(1), 0.5), (ModalityId(2), 0.5)]);
        assert_eq!(select_weak_modality(&s, &equal).unwrap(), ModalityId(0));
        let later = BTreeMap::from([(ModalityId(0), 0.9), (ModalityId(1), 0.4), (ModalityId(2), 0.4)]);
        assert_eq!(select_weak_modality(&s, &later).unwrap(), ModalityId(1));
        let missing = BTreeMap::from([(ModalityId(0), 0.5)]);
        assert!(matches!(select_weak_modality(&s, &missing), Err(CptError::MissingMetric(_))));

        let single = space(&[("image", 3)]);
        let corpus = toy_corpus(&single, 6, 3);
        let c = TrainConfig {
            weak_selection: WeakSelection::Adaptive,
            ..cfg()
        };
        let state = run(TrainState::new(&single, &c, 3).unwrap(), &c, &corpus, &[], None).unwrap();
        assert_eq!(state.weak, Some(ModalityId(0)));
        assert!(state.log.iter().all(|r| r.inter == 0.0 && r.per_strong.is_empty()));
    }

    #[test]
    fn weak_selection_strings() {
        assert_eq!("adaptive".parse::<WeakSelection>().unwrap(), WeakSelection::Adaptive);
        assert_eq!(
            "fixed:video".parse::<WeakSelection>().unwrap(),
            WeakSelection::Fixed("video".into())
        );
        assert!("fixed:".parse::<WeakSelection>().is_err());
        assert!("video".parse::<WeakSelection>().is_err());
        let json = serde_json::to_string(&WeakSelection::Fixed("audio".into())).unwrap();
        assert_eq!(json, "\"fixed:audio\"");

        let s = space(&[("video", 2), ("image", 2)]);
        let c = TrainConfig {
            weak_selection: WeakSelection::Fixed("smell".into()),
            ..cfg()
        };
        let corpus = toy_corpus(&s, 4, 3);
        assert!(matches!(
            run(TrainState::new(&s, &c, 3).unwrap(), &c, &corpus, &[], None),
            Err(CptError::UnknownModality(_))
        ));
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let s = space(&[("video", 2), ("image", 2)]);
        let c = TrainConfig { steps: 0, ..cfg() };
        let initial = TrainState::new(&s, &c, 3).unwrap();
        let out = run(initial.clone(), &c, &toy_corpus(&s, 4, 3), &[], None).unwrap();
        assert_eq!(out.pools, initial.pools);
        assert_eq!(out.step, 0);
        assert!(out.log.is_empty());
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let s = space(&[("video", 4), ("image", 4)]);
        let corpus = toy_corpus(&s, 40, 8);
        let c = TrainConfig {
            steps: 200,
            batch_size: 8,
            ..cfg()
        };
        let out = run(TrainState::new(&s, &c, 8).unwrap(), &c, &corpus, &[], None).unwrap();
        let head: f64 = out.log[..20].iter().map(|r| r.total).sum();
        let tail: f64 = out.log[180..].iter().map(|r| r.total).sum();
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let s = space(&[("video", 3), ("image", 3)]);
        let corpus = toy_corpus(&s, 12, 4);
        let c = cfg();
        let dir = tempfile::tempdir().unwrap();
        let full = run(TrainState::new(&s, &c, 4).unwrap(), &c, &corpus, &[], Some(dir.path())).unwrap();
        let (mid, loaded_cfg) = load_checkpoint(&dir.path().join("step-000010")).unwrap();
        assert_eq!(loaded_cfg, c);
        assert_eq!(mid.step, 10);
        let resumed = run(mid, &loaded_cfg, &corpus, &[], None).unwrap();
        assert_eq!(resumed, full);
        let (end, _) = load_checkpoint(&dir.path().join("step-000030")).unwrap();
        assert_eq!(end, full);
    }

    #[test]
    fn optimizer_state_round_trip_and_corruption() {
        let s = space(&[("video", 2), ("image", 3)]);
        let corpus = toy_corpus(&s, 6, 3);
        let c = TrainConfig { steps: 3, ..cfg() };
        let state = run(TrainState::new(&s, &c, 3).unwrap(), &c, &corpus, &[], None).unwrap();
        let mut buf = Vec::new();
        write_optimizer_state(&mut buf, &state).unwrap();
        let (step, pools) = read_optimizer_state(&mut buf.as_slice()).unwrap();
        assert_eq!(step, 3);
        for ((_, _, _, mom), orig) in pools.iter().zip(&state.moments) {
            assert!(mom.m.iter().zip(&orig.m).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(mom.v.iter().zip(&orig.v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_optimizer_state(&mut bad.as_slice()),
            Err(CptError::BadMagic { .. })
        ));
        assert!(matches!(
            read_optimizer_state(&mut &buf[..buf.len() - 1]),
            Err(CptError::Truncated(_))
        ));
    }

    #[test]
    fn lambda2_zero_matches_isolated_runs() {
        let s = space(&[("video", 3), ("image", 3), ("audio", 2)]);
        let corpus = toy_corpus(&s, 10, 4);
        let c = TrainConfig { lambda2: 0.0, ..cfg() };
        let joint = run(TrainState::new(&s, &c, 4).unwrap(), &c, &corpus, &[], None).unwrap();
        for m in s.modalities() {
            let iso_cfg = TrainConfig {
                train_modalities: Some(vec![s.modality_name(m).unwrap().to_owned()]),
                ..c.clone()
            };
            let iso = run(TrainState::new(&s, &iso_cfg, 4).unwrap(), &iso_cfg, &corpus, &[], None).unwrap();
            assert_eq!(iso.pools[m.index()], joint.pools[m.index()]);
        }
    }

    #[test]
    fn continual_freeze_old_keeps_old_rows() {
        let s = space(&[("video", 2), ("image", 2)]);
        let c = cfg();
        let corpus = toy_corpus(&s, 8, 4);
        let state = run(TrainState::new(&s, &c, 4).unwrap(), &c, &corpus, &[], None).unwrap();
        let req = ExtensionRequest::Labels {
            modality: "video".into(),
            names: vec!["video_new".into()],
        };
        let (ext, remap) = continual_extend(&state, &req, ContinualMode::FreezeOld, &c).unwrap();
        assert_eq!(ext.space.len(), 5);
        assert_eq!(remap.as_slice(), &[0, 1, 3, 4]);
        let mut old_corpus = corpus.clone();
        old_corpus.remap(&remap);
        assert_eq!(old_corpus.modalities[1].positives[0], vec![3]);
        let new_corpus = toy_corpus(&ext.space, 9, 4);
        let c2 = TrainConfig { steps: 60, ..c.clone() };
        let trained = run(ext.clone(), &c2, &new_corpus, &[], None).unwrap();
        for (before, after) in state.pools.iter().zip(&trained.pools) {
            for old in 0..4 {
                assert_eq!(before.row(old), after.row(remap.get(old)));
            }
            assert_ne!(before.params(), &after.params()[..before.params().len()]);
        }
        for m in &trained.moments {
            for old in 0..4 {
                let r = remap.get(old) * 4..remap.get(old) * 4 + 4;
                assert!(m.m[r.clone()].iter().chain(&m.v[r]).all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn continual_new_modality_and_errors() {
        let s = space(&[("video", 2), ("image", 2)]);
        let c = cfg();
        let state = TrainState::new(&s, &c, 4).unwrap();
        let req = ExtensionRequest::Modality {
            name: "audio".into(),
            labels: vec!["bark".into(), "siren".into()],
        };
        let (ext, remap) = continual_extend(&state, &req, ContinualMode::Continue, &c).unwrap();
        assert_eq!(ext.pools.len(), 3);
        assert_eq!(ext.pools[2].rows(), 6);
        assert_eq!(remap, Remap::new(vec![0, 1, 2, 3], 6));
        assert!(ext.pools.iter().all(|p| p.frozen().iter().all(|&f| !f)));

        let empty = ExtensionRequest::Modality {
            name: "depth".into(),
            labels: vec![],
        };
        assert!(matches!(
            continual_extend(&state, &empty, ContinualMode::Continue, &c),
            Err(CptError::EmptyBlock(_))
        ));
        let dup = ExtensionRequest::Labels {
            modality: "image".into(),
            names: vec!["image0".into()],
        };
        assert!(continual_extend(&state, &dup, ContinualMode::Continue, &c).is_err());

        let mut target = s.clone();
        let img = target.modality_by_name("image").unwrap();
        target.add_labels(img, &["image_new"]).unwrap();
        let depth = target.register_modality("depth").unwrap();
        target.add_labels(depth, &["near", "far"]).unwrap();
        let (ext, remap) = continual_extend_to(&state, &target, ContinualMode::FreezeOld, &c).unwrap();
        assert_eq!(remap.as_slice(), &[0, 1, 2, 3]);
        assert_eq!(ext.pools.len(), 3);
        assert_eq!(ext.pools[0].frozen(), &[true, true, true, true, false, false, false]);
        assert!(ext.pools[2].frozen().iter().all(|&f| !f));
        assert!(continual_extend_to(&ext, &s, ContinualMode::Continue, &c).is_err());
    }

    #[test]
    fn metrics_log_round_trip() {
        let s = space(&[("video", 2), ("image", 2)]);
        let corpus = toy_corpus(&s, 8, 4);
        let c = cfg();
        let state = run(TrainState::new(&s, &c, 4).unwrap(), &c, &corpus, &[], None).unwrap();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &state.log).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_owned();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        for key in ["step", "L_total", "L_intra", "L_inter", "per_modality"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), state.log);
    }
}
