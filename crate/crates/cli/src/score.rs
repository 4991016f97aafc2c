use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cpt_core::eval::{
    cosine_matrix, fuse as fuse_pair, predict_all, read_external_predictions, report, write_external_predictions,
    write_similarity_csv, Classifier, EvalReport, PredictionVector, ScoreKind,
};
use cpt_core::matrix::Matrix;
use cpt_core::{LabelSpace, ModalityId};

use crate::files::{create, files_in, read_cpte, read_labels, read_records, write_json};
use crate::manifest::RunManifest;
use crate::train::{load, read_items};
use crate::{DumpSimsArgs, EvalArgs, FuseArgs};

/// Softmax inputs must be non-negative and sum to one within this tolerance.
const SOFTMAX_TOLERANCE: f64 = 1e-6;

enum Prompts {
    /// One classifier per modality, from trained pools.
    Trained(Vec<Classifier>),
    /// Class-prompt embeddings shared by every modality.
    Shared(Classifier),
}

impl Prompts {
    fn for_modality(&self, m: ModalityId) -> &Classifier {
        match self {
            Prompts::Trained(c) => &c[m.index()],
            Prompts::Shared(c) => c,
        }
    }
}

fn class_prompt_matrix(path: &Path, space: &LabelSpace) -> Result<(usize, Matrix)> {
    let (d, records) = read_cpte(path)?;
    let mut rows = vec![None; space.len()];
    for r in records {
        let slot = rows
            .get_mut(r.ref_id as usize)
            .with_context(|| format!("{}: ref_id {} is not a label index", path.display(), r.ref_id))?;
        *slot = Some(r.to_f64());
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("{}: no class prompt for label {i}", path.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok((d, Matrix::from_rows(&rows)?))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    let (space, prompts, dim, step) = if let Some(ckpt) = &a.checkpoint {
        let (dir, state, _) = load(ckpt)?;
        inputs.extend(files_in(&dir)?);
        if let Some(labels) = &a.labels {
            ensure!(
                read_labels(labels)? == state.space,
                "{} does not match the checkpoint's labels",
                labels.display()
            );
            inputs.push(labels.clone());
        }
        let classifiers = state
            .pools
            .iter()
            .map(Classifier::new)
            .collect::<cpt_core::Result<Vec<_>>>()?;
        (
            state.space.clone(),
            Prompts::Trained(classifiers),
            state.dim(),
            Some(state.step),
        )
    } else {
        let labels = a.labels.as_deref().context("--class-prompts needs --labels")?;
        let path = a.class_prompts.as_deref().context("need --checkpoint or --class-prompts")?;
        let space = read_labels(labels)?;
        let (d, m) = class_prompt_matrix(path, &space)?;
        inputs.push(labels.to_path_buf());
        inputs.push(path.to_path_buf());
        (space, Prompts::Shared(Classifier::from_matrix(&m)?), d, None)
    };
    inputs.push(a.items.clone());
    inputs.push(a.embeddings.clone());

    let wanted = a
        .modalities
        .iter()
        .map(|n| space.modality_by_name(n))
        .collect::<cpt_core::Result<Vec<_>>>()?;
    let groups: Vec<_> = read_items(&space, &a.items, &a.embeddings, Some(dim))?
        .into_iter()
        .filter(|g| wanted.is_empty() || wanted.contains(&g.modality))
        .collect();
    if groups.is_empty() {
        bail!("no items to evaluate");
    }
    for m in &wanted {
        ensure!(
            groups.iter().any(|g| g.modality == *m),
            "no items for modality `{}`",
            space.modality_name(*m)?
        );
    }

    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    let mut lines = Vec::new();
    for items in &groups {
        let name = space.modality_name(items.modality)?.to_owned();
        let classifier = prompts.for_modality(items.modality);
        let preds = if a.unrestricted {
            (0..items.len())
                .map(|i| classifier.classify(&space, items.ids[i], items.modality, items.embeddings.row(i), false))
                .collect::<cpt_core::Result<Vec<_>>>()?
        } else {
            predict_all(classifier, &space, items)?
        };
        let r = report(&preds, &items.labels, space.block_range(items.modality)?)?;
        println!(
            "{name}: top1 {:.4} top5 {:.4} mAP {:.4} ({} items)",
            r.top1, r.top5, r.map, r.count
        );
        reports.insert(name, r);
        for p in preds {
            let p = match a.softmax_tau {
                Some(tau) => p.to_softmax(tau)?,
                None => p,
            };
            lines.push((p.item_id, p.scores[p.scored.clone()].to_vec()));
        }
    }

    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
        outputs.push(out.clone());
    }
    if let Some(path) = &a.predictions {
        let mut w = create(path)?;
        write_external_predictions(&mut w, &lines)?;
        w.flush()?;
        outputs.push(path.clone());
    }
    if let Some(target) = outputs.first() {
        RunManifest::new("eval")
            .config(&serde_json::json!({
                "unrestricted": a.unrestricted,
                "softmax_tau": a.softmax_tau,
                "modalities": reports.keys().collect::<Vec<_>>(),
                "checkpoint_step": step,
            }))?
            .inputs(inputs.iter().map(PathBuf::as_path))?
            .outputs(outputs.iter().map(PathBuf::as_path))?
            .write_for(target)?;
    }
    Ok(())
}

fn read_softmax(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let preds = read_external_predictions(BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
    for (id, scores) in &preds {
        let sum: f64 = scores.iter().sum();
        if scores.is_empty() || scores.iter().any(|&s| s < 0.0) || (sum - 1.0).abs() > SOFTMAX_TOLERANCE {
            bail!(
                "{}: scores for item {id} are not a softmax distribution (sum = {sum})",
                path.display()
            );
        }
    }
    Ok(preds)
}

fn as_softmax(item_id: u64, scores: Vec<f64>) -> PredictionVector {
    PredictionVector {
        item_id,
        modality: ModalityId(0),
        scored: 0..scores.len(),
        scores,
        kind: ScoreKind::Softmax,
    }
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let supervised = read_softmax(&a.supervised)?;
    let tuned = read_softmax(&a.tuned)?;
    let mut by_id: HashMap<u64, Vec<f64>> = HashMap::with_capacity(supervised.len());
    for (id, s) in supervised {
        ensure!(
            by_id.insert(id, s).is_none(),
            "{}: duplicate item {id}",
            a.supervised.display()
        );
    }
    ensure!(by_id.len() == tuned.len(), "the two prediction files cover different items");
    let mut fused = Vec::with_capacity(tuned.len());
    for (id, t) in tuned {
        let s = by_id
            .remove(&id)
            .with_context(|| format!("item {id} has no supervised prediction"))?;
        fused.push(fuse_pair(&as_softmax(id, s), &as_softmax(id, t)).with_context(|| format!("item {id}"))?);
    }
    let lines: Vec<_> = fused.iter().map(|p| (p.item_id, p.scores.clone())).collect();
    let mut w = create(&a.out)?;
    write_external_predictions(&mut w, &lines)?;
    w.flush()?;

    let mut inputs = vec![a.supervised.clone(), a.tuned.clone()];
    let mut shown = serde_json::json!({ "items": fused.len() });
    if let (Some(labels), Some(items), Some(name)) = (&a.labels, &a.items, &a.modality) {
        let space = read_labels(labels)?;
        let m = space.modality_by_name(name)?;
        let block = space.block_range(m)?;
        let truth: HashMap<u64, Vec<usize>> = read_records(items, &space)?
            .into_iter()
            .filter(|r| r.modality == m)
            .map(|r| (r.caption_id, r.labels.iter().map(|l| l - block.start).collect()))
            .collect();
        for p in &fused {
            ensure!(
                p.scores.len() == block.len(),
                "item {} has {} scores, `{name}` has {} classes",
                p.item_id,
                p.scores.len(),
                block.len()
            );
        }
        let truths = fused
            .iter()
            .map(|p| {
                truth
                    .get(&p.item_id)
                    .cloned()
                    .with_context(|| format!("item {} is not a `{name}` item", p.item_id))
            })
            .collect::<Result<Vec<_>>>()?;
        let r = report(&fused, &truths, 0..block.len())?;
        println!(
            "{name} fused: top1 {:.4} top5 {:.4} mAP {:.4} ({} items)",
            r.top1, r.top5, r.map, r.count
        );
        shown["report"] = serde_json::to_value(&r)?;
        inputs.push(labels.clone());
        inputs.push(items.clone());
    } else {
        println!("fused {} predictions into {}", fused.len(), a.out.display());
    }
    RunManifest::new("fuse")
        .config(&shown)?
        .inputs(inputs.iter().map(PathBuf::as_path))?
        .outputs([a.out.as_path()])?
        .write_for(&a.out)?;
    Ok(())
}

pub fn dump_sims(a: DumpSimsArgs) -> Result<()> {
    let (dir, state, _) = load(&a.checkpoint)?;
    let mut inputs = files_in(&dir)?;
    let space = &state.space;
    let (sims, shown) = if let Some(pair) = &a.pools {
        let (x, y) = pair.split_once(',').context("--pools expects `a,b`")?;
        let (mx, my) = (space.modality_by_name(x.trim())?, space.modality_by_name(y.trim())?);
        let sims = cosine_matrix(&state.pools[mx.index()].to_matrix(), &state.pools[my.index()].to_matrix())?;
        (sims, serde_json::json!({ "pools": [x.trim(), y.trim()], "step": state.step }))
    } else {
        let items = a.items.as_deref().context("need --pools or --items")?;
        let embeddings = a.embeddings.as_deref().context("--items needs --embeddings")?;
        let name = a.modality.as_deref().context("--items needs --modality")?;
        let m = space.modality_by_name(name)?;
        let group = read_items(space, items, embeddings, Some(state.dim()))?
            .into_iter()
            .find(|g| g.modality == m)
            .with_context(|| format!("no `{name}` items in {}", items.display()))?;
        inputs.push(items.to_path_buf());
        inputs.push(embeddings.to_path_buf());
        let sims = cosine_matrix(&group.embeddings, &state.pools[m.index()].to_matrix())?;
        (sims, serde_json::json!({ "items": name, "step": state.step }))
    };
    let mut w = create(&a.out)?;
    write_similarity_csv(&mut w, state.step, &sims)?;
    w.flush()?;
    println!("wrote {}x{} similarities to {}", sims.rows(), sims.cols(), a.out.display());
    RunManifest::new("dump-sims")
        .config(&shown)?
        .inputs(inputs.iter().map(PathBuf::as_path))?
        .outputs([a.out.as_path()])?
        .write_for(&a.out)?;
    Ok(())
}
