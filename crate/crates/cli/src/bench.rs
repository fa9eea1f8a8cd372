//! Multi-variant, multi-seed sweeps with a summary table.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use softmine::sampler::SamplerKind;
use softmine::trainer::{iterations_to_target, ConvergenceRecord};
use softmine::ImageField;

use crate::config::{config_error, Document, Entry, ExperimentConfig};
use crate::fit::{load_image, run_fit};

/// Keys that only make sense at the top of a plan file.
const PLAN_KEYS: &[&str] = &["seeds", "baseline", "report_at"];

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub variants: Vec<Variant>,
    pub seeds: u64,
    /// Variant the speedup is measured against.
    pub baseline: Option<String>,
    /// Iterations at which mean PSNR is tabulated, besides the final one.
    pub report_at: Vec<u64>,
}

/// Top-level keys of the plan apply to every variant, each
/// `[name]` section overrides them, and `overrides` (from the command line)
/// win over both. Run `s` of a variant uses the variant seed plus `s`.
pub fn build_plan(
    doc: &Document,
    overrides: &[Entry],
    base: &ExperimentConfig,
) -> anyhow::Result<BenchPlan> {
    let mut seeds = 3;
    let mut baseline = None;
    let mut report_at = Vec::new();
    let mut shared = Vec::new();
    for e in &doc.top {
        match e.key.as_str() {
            "seeds" => {
                seeds = e.value.parse().map_err(|_| {
                    config_error(format!(
                        "line {}: bad value {:?} for seeds",
                        e.line, e.value
                    ))
                })?
            }
            "baseline" => baseline = Some(e.value.clone()),
            "report_at" => {
                report_at = e
                    .value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| {
                        config_error(format!(
                            "line {}: bad value {:?} for report_at",
                            e.line, e.value
                        ))
                    })?
            }
            _ => shared.push(e.clone()),
        }
    }
    if seeds == 0 {
        return Err(config_error("seeds must be >= 1"));
    }
    if doc.sections.is_empty() {
        return Err(config_error("bench plan has no [variant] sections"));
    }
    let mut variants = Vec::new();
    for (name, entries) in &doc.sections {
        if let Some(e) = entries.iter().find(|e| PLAN_KEYS.contains(&e.key.as_str())) {
            return Err(config_error(format!(
                "line {}: {} belongs at the top of the plan, not in [{name}]",
                e.line, e.key
            )));
        }
        let mut config = base.clone();
        config.apply(&shared, "plan")?;
        config.apply(entries, "plan")?;
        config.apply(overrides, "--set")?;
        config.out = base.out.join(name);
        variants.push(Variant {
            name: name.clone(),
            config,
        });
    }
    if let Some(b) = &baseline {
        if !variants.iter().any(|v| &v.name == b) {
            return Err(config_error(format!("baseline {b:?} is not a variant")));
        }
    } else {
        baseline = variants
            .iter()
            .find(|v| v.config.train.sampler == SamplerKind::Uniform)
            .map(|v| v.name.clone());
    }
    Ok(BenchPlan {
        variants,
        seeds,
        baseline,
        report_at,
    })
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: usize,
    pub seed: u64,
    pub records: Result<Vec<ConvergenceRecord>, String>,
}

/// Runs every variant for every seed on up to `jobs` threads. Failed runs
/// are reported and do not stop the sweep.
pub fn run_plan(plan: &BenchPlan, jobs: usize) -> anyhow::Result<Vec<RunOutcome>> {
    let mut images: BTreeMap<&Path, ImageField> = BTreeMap::new();
    for v in &plan.variants {
        v.config.validate()?;
        let path = v
            .config
            .image
            .as_deref()
            .expect("validated configs carry an image");
        if !images.contains_key(path) {
            images.insert(path, load_image(&v.config)?);
        }
    }
    let tasks: Vec<(usize, u64)> = (0..plan.variants.len())
        .flat_map(|v| (0..plan.seeds).map(move |s| (v, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::with_capacity(tasks.len()));
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(vi, s)) = tasks.get(i) else { break };
                let variant = &plan.variants[vi];
                let mut cfg = variant.config.clone();
                cfg.train.seed = variant.config.train.seed + s;
                cfg.out = variant.config.out.join(format!("seed{s}"));
                let img = &images[cfg.image.as_deref().expect("validated")];
                let records = run_fit(&cfg, img)
                    .map(|r| r.records)
                    .map_err(|e| format!("{e:#}"));
                match &records {
                    Ok(r) => eprintln!(
                        "{} seed {s}: {:.3} dB",
                        variant.name,
                        r.last().map_or(f64::NAN, |r| r.psnr_db)
                    ),
                    Err(e) => eprintln!("{} seed {s} failed: {e}", variant.name),
                }
                done.lock()
                    .expect("no worker panics while holding the lock")
                    .push(RunOutcome {
                        variant: vi,
                        seed: s,
                        records,
                    });
            });
        }
    });
    let mut outcomes = done.into_inner().expect("workers finished");
    outcomes.sort_by_key(|o| (o.variant, o.seed));
    Ok(outcomes)
}

/// Mean PSNR per evaluation iteration over runs with identical cadence.
pub fn mean_curve(runs: &[&[ConvergenceRecord]]) -> Vec<ConvergenceRecord> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let vals: Vec<&ConvergenceRecord> = runs.iter().filter_map(|run| run.get(i)).collect();
            let k = vals.len() as f64;
            ConvergenceRecord {
                iteration: r.iteration,
                train_loss: vals.iter().map(|v| v.train_loss).sum::<f64>() / k,
                psnr_db: vals.iter().map(|v| v.psnr_db).sum::<f64>() / k,
                elapsed_s: vals.iter().map(|v| v.elapsed_s).sum::<f64>() / k,
                alpha_effective: r.alpha_effective,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub sampler: SamplerKind,
    pub alpha: f64,
    pub runs: usize,
    pub failed: usize,
    pub final_psnr: Option<f64>,
    pub psnr_at: Vec<Option<f64>>,
    pub iters_to_target: Option<u64>,
    pub speedup: Option<f64>,
}

/// Aggregates outcomes. Iterations-to-target are read off each variant's
/// seed-averaged curve. The target is `target_psnr` when the baseline sets
/// one, otherwise the baseline's mean final PSNR.
pub fn summarize(plan: &BenchPlan, outcomes: &[RunOutcome]) -> (Option<f64>, Vec<SummaryRow>) {
    let curves: Vec<(usize, usize, Vec<ConvergenceRecord>)> = (0..plan.variants.len())
        .map(|vi| {
            let mine: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.variant == vi).collect();
            let ok: Vec<&[ConvergenceRecord]> = mine
                .iter()
                .filter_map(|o| o.records.as_deref().ok())
                .collect();
            (ok.len(), mine.len() - ok.len(), mean_curve(&ok))
        })
        .collect();
    let base = plan
        .baseline
        .as_ref()
        .and_then(|b| plan.variants.iter().position(|v| &v.name == b));
    let target = base.and_then(|bi| {
        plan.variants[bi]
            .config
            .train
            .target_psnr
            .or_else(|| curves[bi].2.last().map(|r| r.psnr_db))
    });
    let iters: Vec<Option<u64>> = curves
        .iter()
        .map(|(_, _, c)| target.and_then(|t| iterations_to_target(c, t)))
        .collect();
    let base_iters = base.and_then(|bi| iters[bi]);
    let rows = plan
        .variants
        .iter()
        .zip(&curves)
        .zip(&iters)
        .map(|((v, (runs, failed, curve)), &it)| SummaryRow {
            variant: v.name.clone(),
            sampler: v.config.train.sampler,
            alpha: v.config.train.mining.alpha_target,
            runs: *runs,
            failed: *failed,
            final_psnr: curve.last().map(|r| r.psnr_db),
            psnr_at: plan
                .report_at
                .iter()
                .map(|&i| curve.iter().find(|r| r.iteration == i).map(|r| r.psnr_db))
                .collect(),
            iters_to_target: it,
            speedup: match (base_iters, it) {
                (Some(b), Some(s)) if s > 0 => Some(b as f64 / s as f64),
                _ => None,
            },
        })
        .collect();
    (target, rows)
}

pub fn summary_csv(plan: &BenchPlan, rows: &[SummaryRow]) -> String {
    let mut s = String::from("variant,sampler,alpha,runs,failed,final_psnr");
    for it in &plan.report_at {
        s.push_str(&format!(",psnr_at_{it}"));
    }
    s.push_str(",iters_to_target,speedup\n");
    let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}",
            r.variant,
            r.sampler.as_str(),
            r.alpha,
            r.runs,
            r.failed,
            num(r.final_psnr)
        ));
        for p in &r.psnr_at {
            s.push_str(&format!(",{}", num(*p)));
        }
        s.push_str(&format!(
            ",{},{}\n",
            r.iters_to_target.map_or(String::new(), |i| i.to_string()),
            num(r.speedup)
        ));
    }
    s
}
