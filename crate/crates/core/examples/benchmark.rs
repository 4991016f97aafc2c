//! Runs the synthetic benchmark over several seeds and prints test top-1 per
//! modality next to the class-prompt zero-shot baseline.
//!
//! Usage: `cargo run --release --example benchmark -- [key=value ...]`
//!
//! Keys: seeds, steps, batch, lr, lambda1, lambda2, margin, tau, direction
//! (uni|bi), weak (adaptive|fixed:<name>), delta, caption_sigma, init
//! (gaussian|text). `variants=a=1,b=2;c=3` trains each `;`-separated override
//! set on the same benchmarks for paired comparison.

use std::time::Instant;

use cpt_core::bench::{BenchConfig, Benchmark};
use cpt_core::eval::{evaluate, zero_shot_baseline, Classifier};
use cpt_core::objectives::Direction;
use cpt_core::prompt_pool::PromptPool;
use cpt_core::trainer::{run, TrainConfig, TrainState};

type Error = Box<dyn std::error::Error>;

#[derive(Clone)]
struct Setup {
    train: TrainConfig,
    bench: BenchConfig,
    text_init: bool,
}

fn apply(setup: &mut Setup, k: &str, v: &str) -> Result<(), Error> {
    let cfg = &mut setup.train;
    match k {
        "steps" => cfg.steps = v.parse()?,
        "batch" => cfg.batch_size = v.parse()?,
        "lr" => cfg.lr = v.parse()?,
        "lambda1" => cfg.lambda1 = v.parse()?,
        "lambda2" => cfg.lambda2 = v.parse()?,
        "margin" => cfg.margin = v.parse()?,
        "tau" => cfg.tau = v.parse()?,
        "direction" => cfg.direction = if v == "bi" { Direction::Bi } else { Direction::Uni },
        "weak" => cfg.weak_selection = v.parse()?,
        "delta" => setup.bench.delta_sigma = v.parse()?,
        "caption_sigma" => setup.bench.caption_sigma = v.parse()?,
        "init" => setup.text_init = v == "text",
        _ => return Err(format!("unknown key `{k}`").into()),
    }
    Ok(())
}

fn main() -> Result<(), Error> {
    let mut seeds = 3u64;
    let mut base = Setup {
        train: TrainConfig::default(),
        bench: BenchConfig::default(),
        text_init: false,
    };
    let mut variants = vec![String::new()];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "seeds" => seeds = v.parse()?,
            "variants" => variants = v.split(';').map(str::to_owned).collect(),
            _ => apply(&mut base, k, v)?,
        }
    }
    let setups = variants
        .iter()
        .map(|spec| {
            let mut s = base.clone();
            for kv in spec.split(',').filter(|kv| !kv.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or("expected key=value in variant")?;
                apply(&mut s, k, v)?;
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let mut sums = vec![[0.0; 4]; setups.len()];
    for seed in 0..seeds {
        let mut line = format!("seed {seed:2}");
        for (vi, setup) in setups.iter().enumerate() {
            let b = Benchmark::build(&BenchConfig {
                seed,
                ..setup.bench.clone()
            })?;
            let c = TrainConfig {
                seed,
                ..setup.train.clone()
            };
            let start = Instant::now();
            let state = if setup.text_init {
                let pools = b
                    .space
                    .modalities()
                    .map(|m| PromptPool::from_embeddings(&b.space, m, &b.class_prompts(m)?))
                    .collect::<Result<Vec<_>, _>>()?;
                TrainState::from_pools(&b.space, pools)?
            } else {
                TrainState::new(&b.space, &c, b.config.d)?
            };
            let state = run(state, &c, &b.train, &b.validation, None)?;
            let secs = start.elapsed().as_secs_f64();
            for items in &b.test {
                let m = items.modality;
                let r = evaluate(&Classifier::new(&state.pools[m.index()])?, &b.space, items)?;
                sums[vi][m.index()] += r.top1;
                if m.index() == 0 {
                    line += &format!(" | v{vi} {secs:4.2}s video={:.3}", r.top1);
                }
            }
            let video = b.modality("video")?;
            let zs = zero_shot_baseline(&b.space, &b.class_prompts(video)?, &b.test[video.index()])?;
            sums[vi][3] += zs.top1;
        }
        println!("{line}");
    }
    let n = seeds as f64;
    for (spec, s) in variants.iter().zip(&sums) {
        println!(
            "[{spec}] video={:.4} audio={:.4} image={:.4} zs_video={:.4}",
            s[0] / n,
            s[1] / n,
            s[2] / n,
            s[3] / n
        );
    }
    Ok(())
}
