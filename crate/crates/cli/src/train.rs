use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpt_core::bench::items_from_records;
use cpt_core::eval::LabeledItems;
use cpt_core::objectives::{Direction, SimilarityMode};
use cpt_core::prompt_pool::PromptPool;
use cpt_core::trainer::{
    continual_extend_to, load_checkpoint, run, save_checkpoint, write_metrics, ContinualMode, OptimizerKind, TrainConfig,
    TrainState, TrainingCorpus, WeakSelection,
};
use cpt_core::LabelSpace;

use crate::files::{create, files_in, merge, parse_kv, read_config, read_cpte, read_labels, read_records, write_labels};
use crate::manifest::RunManifest;
use crate::{ContinualArg, DirectionArg, ExtendArgs, ModeArg, OptimizerArg, TrainArgs};

/// A checkpoint directory, or a training output directory whose latest
/// `step-NNNNNN` checkpoint is used.
pub fn resolve_checkpoint(dir: &Path) -> Result<PathBuf> {
    if dir.join("state.json").is_file() {
        return Ok(dir.to_path_buf());
    }
    let mut steps: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot open checkpoint {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("state.json").is_file() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("step-")))
        .collect();
    steps.sort();
    steps
        .pop()
        .with_context(|| format!("no checkpoint found in {}", dir.display()))
}

pub fn load(dir: &Path) -> Result<(PathBuf, TrainState, TrainConfig)> {
    let dir = resolve_checkpoint(dir)?;
    let (state, cfg) = load_checkpoint(&dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?;
    Ok((dir, state, cfg))
}

fn apply_flags(cfg: &mut TrainConfig, a: &TrainArgs) -> Result<()> {
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { cfg.$field = v; })*};
    }
    set!(steps, batch_size, lr, lambda1, lambda2, margin, tau, eval_every, seed);
    if let Some(w) = &a.weak {
        cfg.weak_selection = w.parse()?;
    }
    if let Some(d) = a.direction {
        cfg.direction = match d {
            DirectionArg::Uni => Direction::Uni,
            DirectionArg::Bi => Direction::Bi,
        };
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Cosine => SimilarityMode::Cosine,
            ModeArg::Dot => SimilarityMode::Dot,
        };
    }
    match a.optimizer {
        Some(OptimizerArg::Sgd) => cfg.optimizer = OptimizerKind::Sgd,
        Some(OptimizerArg::Adam) if !matches!(cfg.optimizer, OptimizerKind::Adam { .. }) => {
            cfg.optimizer = OptimizerKind::default()
        }
        _ => {}
    }
    if !a.only.is_empty() {
        cfg.train_modalities = Some(a.only.clone());
    }
    cfg.validate()?;
    Ok(())
}

/// Items of every modality that has at least one, in modality order.
pub fn read_items(space: &LabelSpace, items: &Path, embeddings: &Path, dim: Option<usize>) -> Result<Vec<LabeledItems>> {
    let records = read_records(items, space)?;
    let (d, vectors) = read_cpte(embeddings)?;
    if let Some(dim) = dim {
        if d != dim {
            bail!("{} holds {d}-dimensional embeddings, expected {dim}", embeddings.display());
        }
    }
    let mut out = Vec::new();
    for m in space.modalities() {
        let items = items_from_records(m, &records, &vectors, d).with_context(|| format!("in {}", items.display()))?;
        if !items.is_empty() {
            out.push(items);
        }
    }
    Ok(out)
}

fn initial_state(a: &TrainArgs, space: &LabelSpace, cfg: &TrainConfig, dim: usize) -> Result<TrainState> {
    let mut given = std::collections::BTreeMap::new();
    for kv in &a.init_prompts {
        let (name, path) = parse_kv(kv)?;
        let m = space.modality_by_name(&name)?;
        let (d, records) = read_cpte(Path::new(&path))?;
        if d != dim {
            bail!("{path} holds {d}-dimensional prompts, the corpus is {dim}-dimensional");
        }
        let mut rows = vec![None; space.len()];
        for r in records {
            let slot = rows
                .get_mut(r.ref_id as usize)
                .with_context(|| format!("{path}: ref_id {} is not a label index", r.ref_id))?;
            *slot = Some(r.vector);
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.with_context(|| format!("{path}: no prompt for label {i}")))
            .collect::<Result<Vec<_>>>()?;
        given.insert(m, PromptPool::from_embeddings(space, m, &rows)?);
    }
    let init = cfg.pool_init();
    let pools = space
        .modalities()
        .map(|m| match given.remove(&m) {
            Some(p) => Ok(p),
            None => PromptPool::init(space, m, &init, dim),
        })
        .collect::<cpt_core::Result<Vec<_>>>()?;
    Ok(TrainState::from_pools(space, pools)?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let space = read_labels(&a.labels)?;
    let file = read_config(a.config.as_deref())?;
    let mut inputs = vec![a.labels.clone(), a.corpus.clone(), a.embeddings.clone()];

    let (resumed, base) = match &a.resume {
        Some(dir) => {
            let (dir, state, cfg) = load(dir)?;
            inputs.extend(files_in(&dir)?);
            (Some(state), cfg)
        }
        None => (None, TrainConfig::default()),
    };
    let mut cfg = merge(&base, file.train.as_ref(), "train")?;
    apply_flags(&mut cfg, &a)?;

    let records = read_records(&a.corpus, &space)?;
    let (dim, embeddings) = read_cpte(&a.embeddings)?;
    let corpus = TrainingCorpus::from_records(&space, &records, &embeddings)?;

    let state = match resumed {
        Some(state) if state.space == space => {
            if a.freeze_old {
                bail!("--freeze-old needs a label manifest that extends the checkpoint's labels");
            }
            state
        }
        Some(state) => {
            if !space.extends(&state.space) {
                bail!("{} does not extend the checkpoint's label space", a.labels.display());
            }
            let mode = if a.freeze_old {
                ContinualMode::FreezeOld
            } else {
                ContinualMode::Continue
            };
            continual_extend_to(&state, &space, mode, &cfg)?.0
        }
        None => initial_state(&a, &space, &cfg, dim)?,
    };
    if state.dim() != dim {
        bail!(
            "corpus embeddings are {dim}-dimensional, prompts are {}-dimensional",
            state.dim()
        );
    }

    let validation = match (&a.val_items, &a.val_embeddings) {
        (Some(items), Some(emb)) => {
            inputs.push(items.clone());
            inputs.push(emb.clone());
            read_items(&space, items, emb, Some(dim))?
        }
        _ => Vec::new(),
    };
    if matches!(cfg.weak_selection, WeakSelection::Adaptive) && validation.is_empty() {
        bail!("adaptive weak-modality selection needs --val-items and --val-embeddings; or pass --weak fixed:<modality>");
    }
    for kv in &a.init_prompts {
        inputs.push(PathBuf::from(parse_kv(kv)?.1));
    }
    inputs.extend(a.config.clone());

    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let state = run(state, &cfg, &corpus, &validation, Some(&a.out))?;
    let last = a.out.join(format!("step-{:06}", state.step));
    if !last.join("state.json").is_file() {
        save_checkpoint(&last, &state, &cfg)?;
    }
    let labels = a.out.join("labels.json");
    write_labels(&labels, &state.space)?;
    let metrics = a.out.join("metrics.jsonl");
    let mut w = create(&metrics)?;
    write_metrics(&mut w, &state.log)?;
    std::io::Write::flush(&mut w)?;

    if let Some(rec) = state.log.last() {
        println!("step {} L_total {:.6e} checkpoint {}", rec.step, rec.total, last.display());
    } else {
        println!("step {} checkpoint {}", state.step, last.display());
    }
    let mut outputs = files_in(&last)?;
    outputs.push(labels);
    outputs.push(metrics);
    RunManifest::new("train")
        .config(&cfg)?
        .seed("train", cfg.seed)
        .inputs(inputs.iter().map(PathBuf::as_path))?
        .outputs(outputs.iter().map(PathBuf::as_path))?
        .write_for(&a.out)?;
    Ok(())
}

fn split_labels(kv: &str) -> Result<(String, Vec<String>)> {
    let (name, list) = parse_kv(kv)?;
    let labels: Vec<String> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    if labels.is_empty() {
        bail!("no labels given for `{name}`");
    }
    Ok((name, labels))
}

pub fn extend(a: ExtendArgs) -> Result<()> {
    if a.add_labels.is_empty() && a.add_modality.is_empty() {
        bail!("nothing to add (use --add-labels or --add-modality)");
    }
    let (dir, state, cfg) = load(&a.checkpoint)?;
    let mut space = state.space.clone();
    for kv in &a.add_labels {
        let (name, labels) = split_labels(kv)?;
        let m = space.modality_by_name(&name)?;
        space.add_labels(m, &labels)?;
    }
    for kv in &a.add_modality {
        let (name, labels) = split_labels(kv)?;
        let m = space.register_modality(&name)?;
        space.add_labels(m, &labels)?;
    }
    let mode = match a.mode {
        ContinualArg::Continue => ContinualMode::Continue,
        ContinualArg::FreezeOld => ContinualMode::FreezeOld,
    };
    let (extended, _) = continual_extend_to(&state, &space, mode, &cfg)?;
    save_checkpoint(&a.out, &extended, &cfg)?;
    write_labels(&a.out.join("labels.json"), &extended.space)?;
    println!(
        "extended {} labels to {} across {} modalities into {}",
        state.space.len(),
        extended.space.len(),
        extended.space.modality_count(),
        a.out.display()
    );
    let inputs = files_in(&dir)?;
    let outputs = files_in(&a.out)?;
    RunManifest::new("extend")
        .config(&cfg)?
        .seed("init", cfg.seed)
        .inputs(inputs.iter().map(PathBuf::as_path))?
        .outputs(outputs.iter().map(PathBuf::as_path))?
        .write_for(&a.out)?;
    Ok(())
}
