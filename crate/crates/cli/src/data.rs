use std::io::Write;

use anyhow::{bail, Context, Result};
use cpt_core::datagen::{generate_corpus, generate_test_items, write_corpus, GenConfig};
use cpt_core::embedding::{NoiseSource, SyntheticEncoder, SyntheticEncoderConfig};
use serde::Serialize;

use crate::files::{create, merge, parse_kv_as, read_config, read_cpte, read_labels, read_records, write_cpte};
use crate::manifest::RunManifest;
use crate::{EncodeArgs, EncodeSource, GenArgs};

#[derive(Serialize)]
struct ItemsConfig<'a> {
    items_per_class: usize,
    modalities: Vec<&'a str>,
    id_base: u64,
    seed: u64,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let space = read_labels(&args.labels)?;
    let file = read_config(args.config.as_deref())?;
    let mut cfg: GenConfig = merge(&GenConfig::default(), file.gen.as_ref(), "gen")?;
    for kv in &args.per_modality {
        let (k, v) = parse_kv_as::<usize>(kv)?;
        cfg.per_modality_count.insert(k, v);
    }
    for kv in &args.k_max {
        let (k, v) = parse_kv_as::<usize>(kv)?;
        cfg.k_max.insert(k, v);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let mut inputs = vec![args.labels.as_path()];
    inputs.extend(args.config.as_deref());
    let manifest = if let Some(per_class) = args.items_per_class {
        if per_class == 0 {
            bail!("--items-per-class must be >= 1");
        }
        let modalities = if args.modalities.is_empty() {
            space.modalities().collect()
        } else {
            args.modalities
                .iter()
                .map(|n| space.modality_by_name(n))
                .collect::<cpt_core::Result<Vec<_>>>()?
        };
        let mut records = Vec::new();
        let mut next = args.id_base;
        for &m in &modalities {
            let items = generate_test_items(&space, m, per_class, next, cfg.seed)?;
            next += items.len() as u64;
            records.extend(items);
        }
        write_records(&args.out, &space, &records)?;
        let shown = ItemsConfig {
            items_per_class: per_class,
            modalities: modalities
                .iter()
                .map(|&m| space.modality_name(m))
                .collect::<cpt_core::Result<_>>()?,
            id_base: args.id_base,
            seed: cfg.seed,
        };
        println!("wrote {} test items to {}", records.len(), args.out.display());
        RunManifest::new("gen").config(&shown)?
    } else {
        if cfg.per_modality_count.is_empty() {
            bail!("no caption counts given (use --per-modality NAME=COUNT or a config file)");
        }
        let records = generate_corpus(&space, &cfg)?;
        write_records(&args.out, &space, &records)?;
        println!("wrote {} captions to {}", records.len(), args.out.display());
        RunManifest::new("gen").config(&cfg)?
    };
    manifest
        .seed("gen", cfg.seed)
        .inputs(inputs)?
        .outputs([args.out.as_path()])?
        .write_for(&args.out)?;
    Ok(())
}

fn write_records(
    path: &std::path::Path,
    space: &cpt_core::LabelSpace,
    records: &[cpt_core::datagen::CaptionRecord],
) -> Result<()> {
    let mut w = create(path)?;
    write_corpus(&mut w, space, records)?;
    w.flush()?;
    Ok(())
}

pub fn encode(args: EncodeArgs) -> Result<()> {
    let space = read_labels(&args.labels)?;
    let file = read_config(args.config.as_deref())?;
    let mut cfg: SyntheticEncoderConfig = merge(&SyntheticEncoderConfig::default(), file.encoder.as_ref(), "encoder")?;
    if let Some(d) = args.d {
        cfg.d = d;
    }
    if let Some(s) = args.anchor_seed {
        cfg.anchor_seed = s;
    }
    if let Some(s) = args.delta_sigma {
        cfg.delta_sigma = s;
    }
    for kv in &args.noise {
        let (k, v) = parse_kv_as::<f64>(kv)?;
        cfg.noise_sigma.insert(k, v);
    }
    for kv in &args.test_noise {
        let (k, v) = parse_kv_as::<f64>(kv)?;
        cfg.test_noise_sigma.insert(k, v);
    }
    for name in cfg.noise_sigma.keys().chain(cfg.test_noise_sigma.keys()) {
        space.modality_by_name(name).context("noise given for an unknown modality")?;
    }
    if let Some(reference) = &args.reference {
        let (d, _) = read_cpte(reference)?;
        if d != cfg.d {
            bail!(
                "embedding dimension {} does not match reference {} (d = {d})",
                cfg.d,
                reference.display()
            );
        }
    }
    let encoder = SyntheticEncoder::new(&space, cfg.clone())?;

    let mut inputs = vec![args.labels.as_path()];
    inputs.extend(args.config.as_deref());
    inputs.extend(args.reference.as_deref());
    let records = match args.source {
        EncodeSource::ClassPrompts => {
            let name = args.modality.as_deref().context("--source class-prompts needs --modality")?;
            encoder.encode_class_prompts(&space, space.modality_by_name(name)?)?
        }
        EncodeSource::Caption | EncodeSource::Test => {
            let input = args
                .input
                .as_deref()
                .context("--input is required for captions and test items")?;
            inputs.push(input);
            let source = match args.source {
                EncodeSource::Caption => NoiseSource::Caption,
                _ => NoiseSource::TestItem,
            };
            read_records(input, &space)?
                .iter()
                .map(|r| encoder.encode_labels(r.caption_id, &r.labels, r.modality, source))
                .collect::<cpt_core::Result<Vec<_>>>()?
        }
    };
    write_cpte(&args.out, cfg.d, &records)?;
    println!("wrote {} embeddings (d = {}) to {}", records.len(), cfg.d, args.out.display());
    RunManifest::new("encode")
        .config(&cfg)?
        .seed("anchor", cfg.anchor_seed)
        .inputs(inputs)?
        .outputs([args.out.as_path()])?
        .write_for(&args.out)?;
    Ok(())
}
