use std::io::Write;

use anyhow::{bail, Result};
use cpt_core::objectives::{finite_difference_check, CoordSelection, RandomInstance};
use serde::Serialize;

use crate::files::create;
use crate::manifest::RunManifest;
use crate::CheckGradArgs;

const TERMS: [(&str, f64, f64); 3] = [("intra", 1.0, 0.0), ("inter", 0.0, 1.0), ("total", 1.0, 1.0)];

#[derive(Serialize)]
struct Line<'a> {
    seed: u64,
    term: &'a str,
    #[serde(flatten)]
    report: cpt_core::objectives::GradCheckReport,
}

pub fn check_grad(a: CheckGradArgs) -> Result<()> {
    if a.instances == 0 {
        bail!("--instances must be >= 1");
    }
    let mut failures = 0;
    let mut lines = Vec::new();
    for seed in a.seed..a.seed + a.instances {
        let inst = RandomInstance::generate(seed)?;
        for (term, l1, l2) in TERMS {
            let report = finite_difference_check(&inst.objective(l1, l2), &inst.pools, a.h, a.tol, CoordSelection::All)?;
            println!(
                "{} instance {seed:3} {term:5} checked {:4} excluded {:3} max_rel {:.3e}",
                if report.passed { "ok  " } else { "FAIL" },
                report.checked,
                report.excluded.len(),
                report.max_rel_error
            );
            if !report.passed {
                failures += 1;
            }
            lines.push(Line { seed, term, report });
        }
    }
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        for l in &lines {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        drop(w);
        RunManifest::new("check-grad")
            .config(&serde_json::json!({ "instances": a.instances, "h": a.h, "tol": a.tol }))?
            .seed("first_instance", a.seed)
            .outputs([out.as_path()])?
            .write_for(out)?;
    }
    if failures > 0 {
        bail!("{failures} of {} gradient checks exceeded tolerance {}", lines.len(), a.tol);
    }
    Ok(())
}
