//! Aggregation of finished runs into summary tables and plot-ready curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::pipeline::{budget_file, run_pipeline, PipelineOutcome, RunOptions, RunPaths, RunSummary};
use crate::aggregation::NoiseMechanism;
use crate::error::{DgdError, Result};
use crate::io::read_text;

/// Noise scales of the budget-vs-scale curve.
pub const NOISE_SCALE_GRID: [f64; 10] = [5.0, 10.0, 20.0, 30.0, 40.0, 60.0, 80.0, 100.0, 150.0, 200.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run: String,
    pub seed: u64,
    pub query_count: usize,
    pub noise_parameter: f64,
    pub student_acc: f64,
    pub baseline_acc: f64,
    pub ensemble_acc: f64,
    pub eps_total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyPoint {
    pub query_count: usize,
    pub runs: usize,
    pub median_student_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetPoint {
    pub x: f64,
    pub eps_total: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub accuracy_vs_queries: Vec<AccuracyPoint>,
    pub budget_vs_queries: Vec<BudgetPoint>,
    pub budget_vs_noise_scale: Vec<BudgetPoint>,
    pub dir: PathBuf,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run directories under `root`: `root` itself if it holds a run, otherwise
/// its immediate subdirectories that do, in name order.
fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if RunPaths::new(root).config().exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| DgdError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| RunPaths::new(p).config().exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| DgdError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DgdError::Data(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Reads every run under `root` and writes the tables to `root/report/`.
pub fn emit_report(root: impl AsRef<Path>) -> Result<Report> {
    let root = root.as_ref();
    let dirs = run_dirs(root)?;
    if dirs.is_empty() {
        return Err(DgdError::Report {
            missing: vec![RunPaths::new(root).config().display().to_string()],
        });
    }
    let mut missing = Vec::new();
    for d in &dirs {
        let p = RunPaths::new(d);
        for f in [p.summary(), p.file("budget.json")] {
            if !f.exists() {
                missing.push(f.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(DgdError::Report { missing });
    }

    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for d in &dirs {
        let p = RunPaths::new(d);
        let s: RunSummary = serde_json::from_str(&read_text(&p.summary())?)
            .map_err(|e| DgdError::Data(format!("{}: {e}", p.summary().display())))?;
        configs.push(RunConfig::load(p.config())?);
        rows.push(SummaryRow {
            run: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            seed: s.seed,
            query_count: s.query_count,
            noise_parameter: s.noise_parameter,
            student_acc: s.student_acc,
            baseline_acc: s.baseline_acc,
            ensemble_acc: s.ensemble_acc,
            eps_total: s.eps_total,
        });
    }

    let mut by_q: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_q.entry(r.query_count).or_default().push(r.student_acc);
    }
    let accuracy_vs_queries: Vec<AccuracyPoint> = by_q
        .into_iter()
        .map(|(q, mut accs)| AccuracyPoint {
            query_count: q,
            runs: accs.len(),
            median_student_acc: median(&mut accs),
        })
        .collect();

    let mut budget_vs_queries: Vec<BudgetPoint> = Vec::new();
    for r in &rows {
        if let Some(e) = r.eps_total {
            if !budget_vs_queries.iter().any(|p| p.x == r.query_count as f64) {
                budget_vs_queries.push(BudgetPoint {
                    x: r.query_count as f64,
                    eps_total: e,
                });
            }
        }
    }
    budget_vs_queries.sort_by(|a, b| a.x.total_cmp(&b.x));

    let budget_vs_noise_scale = budget_vs_noise_scale(&configs[0])?;

    let dir = root.join("report");
    write_csv(&dir.join("summary.csv"), &rows)?;
    write_csv(&dir.join("accuracy_vs_queries.csv"), &accuracy_vs_queries)?;
    write_csv(&dir.join("budget_vs_queries.csv"), &budget_vs_queries)?;
    write_csv(&dir.join("budget_vs_noise_scale.csv"), &budget_vs_noise_scale)?;
    Ok(Report {
        rows,
        accuracy_vs_queries,
        budget_vs_queries,
        budget_vs_noise_scale,
        dir,
    })
}

/// Best composed budget at the configured query count across
/// [`NOISE_SCALE_GRID`].
pub fn budget_vs_noise_scale(cfg: &RunConfig) -> Result<Vec<BudgetPoint>> {
    NOISE_SCALE_GRID
        .iter()
        .map(|&scale| {
            let c = RunConfig {
                aggregation: NoiseMechanism::Laplace { scale },
                ..cfg.clone()
            };
            let b = budget_file(&c, cfg.query_count as u64)?;
            Ok(BudgetPoint {
                x: scale,
                eps_total: b.best.map(|r| r.eps_total).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Runs `base` once per (query count, seed) under `root/q<q>-s<seed>`.
pub fn run_query_sweep(
    base: &RunConfig,
    queries: &[usize],
    seeds: &[u64],
    root: impl AsRef<Path>,
    opts: RunOptions,
) -> Result<Vec<PipelineOutcome>> {
    let mut out = Vec::new();
    for &q in queries {
        for &seed in seeds {
            let cfg = RunConfig {
                query_count: q,
                seed,
                output_dir: None,
                ..base.clone()
            };
            out.push(run_pipeline(&cfg, root.as_ref().join(format!("q{q}-s{seed}")), opts)?);
        }
    }
    Ok(out)
}
