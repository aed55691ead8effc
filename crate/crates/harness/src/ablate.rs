//! Variant ladder: train every preset under matched seeds and compare.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use twbert_core::attention::Variant;
use twbert_core::data::Split;
use twbert_core::Scalar;

use crate::config::{Preset, RunConfig};
use crate::export::mean_shape_word_score;
use crate::retrieval::{evaluate, EvalMode, RetrievalReport};
use crate::train::{corpus_for, pretrain, split_items};

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Held-out text-to-video report.
    pub report: RetrievalReport,
    /// Absent for the base variant.
    pub trajectory: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<SeedResult>,
    /// Medians over seeds.
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub trajectory: Option<f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl AblationRow {
    fn new(label: &str, runs: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        let trajectory = runs
            .iter()
            .map(|r| r.trajectory)
            .collect::<Option<Vec<f64>>>()
            .map(|t| median(&t));
        AblationRow {
            label: label.to_string(),
            r1: col(|r| r.report.r1),
            r5: col(|r| r.report.r5),
            r10: col(|r| r.report.r10),
            medr: col(|r| r.report.medr),
            trajectory,
            runs,
        }
    }
}

/// Trains `cfg` under `seed`, then scores it on the test split.
pub fn run_one<T: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    mode: EvalMode,
    out: Option<&Path>,
) -> anyhow::Result<SeedResult> {
    let cfg = RunConfig { seed, ..cfg.clone() };
    let state = pretrain::<T>(cfg.clone(), out)?;
    let corpus = corpus_for(&cfg)?;
    let test = split_items::<T>(&corpus, Split::Test);
    let [t2v, _] = evaluate(&state.model, &test, mode, cfg.rerank_k)?;
    let trajectory = match cfg.variant {
        Variant::T2w => Some(mean_shape_word_score(&state.model, &corpus.test)?),
        Variant::Base => None,
    };
    Ok(SeedResult {
        seed,
        report: t2v,
        trajectory,
    })
}

pub fn ablate<T: Scalar>(
    base: &RunConfig,
    presets: &[Preset],
    seeds: &[u64],
    mode: EvalMode,
    out: Option<&Path>,
) -> anyhow::Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        anyhow::bail!("ablation needs at least one seed");
    }
    let mut rows = Vec::new();
    for &preset in presets {
        let cfg = preset.apply(base);
        let mut runs = Vec::new();
        for &seed in seeds {
            log::info!("ablation {} seed {seed}", preset.label());
            let dir = out.map(|o| o.join(format!("{}-seed{seed}", preset.label())));
            runs.push(run_one::<T>(&cfg, seed, mode, dir.as_deref())?);
        }
        rows.push(AblationRow::new(preset.label(), runs));
    }
    Ok(rows)
}

fn fmt_traj(t: Option<f64>) -> String {
    t.map_or_else(|| "-".to_string(), |t| format!("{t:.4}"))
}

pub fn to_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Method | R@1 | R@5 | R@10 | MedR | Trajectory |\n|---|---|---|---|---|---|\n");
    for r in rows {
        writeln!(
            s,
            "| {} | {:.1} | {:.1} | {:.1} | {} | {} |",
            r.label,
            r.r1,
            r.r5,
            r.r10,
            r.medr,
            fmt_traj(r.trajectory)
        )
        .unwrap();
    }
    s
}

/// Median rows first (`seed` = `median`), then one line per run.
pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,seed,r1,r5,r10,medr,trajectory\n");
    let traj = |t: Option<f64>| t.map_or(String::new(), |t| t.to_string());
    for r in rows {
        writeln!(s, "{},median,{},{},{},{},{}", r.label, r.r1, r.r5, r.r10, r.medr, traj(r.trajectory)).unwrap();
    }
    for r in rows {
        for run in &r.runs {
            let p = &run.report;
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                run.seed,
                p.r1,
                p.r5,
                p.r10,
                p.medr,
                traj(run.trajectory)
            )
            .unwrap();
        }
    }
    s
}
