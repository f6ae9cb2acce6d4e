//! Report tables and figure data from a results directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use log::warn;
use serde::{Deserialize, Serialize};

use sart_core::data::Task;
use sart_core::metrics::{aggregate, pearson, write_aggregate_csv, write_report_csv, AggregateRow, MetricsReport};
use sart_core::trainer::Method;
use sart_core::Error as CoreError;

use crate::store::{self, ResultStore, RunSpec};

pub const REPORT_CSV: &str = "report.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const PER_TASK_CSV: &str = "per_task.csv";
pub const FIG5A_CSV: &str = "fig5a_score_vs_shortcut.csv";
pub const FIG5B_CSV: &str = "fig5b_alignment_by_class.csv";
pub const FIG5C_CSV: &str = "fig5c_weight_curve.csv";

/// Lambda of the plotted reweighting curve.
pub const CURVE_LAMBDA: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: Task,
    pub method: String,
    pub clean_accuracy: f64,
    pub robustness: f64,
    pub reasoning_consistency: f64,
    pub detection_f1: Option<f64>,
    pub grad_alignment: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub sample_index: usize,
    pub score: f64,
    pub alignment: f64,
    pub shortcut_consistent: bool,
}

/// Diagnostics dump behind the score figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FigureSource {
    pub run: PathBuf,
    pub points: Vec<ScorePoint>,
    /// Absent when the scores have zero variance.
    pub pearson_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub runs: usize,
    pub duplicates_dropped: usize,
    pub methods: Vec<String>,
    pub figure_run: Option<PathBuf>,
    pub pearson_r: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Completed runs, one per `(task, name, seed)`; on duplicates the most
/// recently written run wins.
pub fn collect(store: &ResultStore) -> Result<(Vec<(PathBuf, RunSpec, MetricsReport)>, usize)> {
    let runs = store.completed()?;
    if runs.is_empty() {
        bail!("no completed runs under {}", store.root().display());
    }
    let total = runs.len();
    let mut latest: BTreeMap<(String, String, u64), (std::time::SystemTime, (PathBuf, RunSpec, MetricsReport))> = BTreeMap::new();
    for run in runs {
        let key = (run.2.task.name().to_string(), run.2.method.clone(), run.2.seed);
        let mtime = std::fs::metadata(run.0.join(store::METRICS_FILE)).and_then(|m| m.modified()).unwrap_or(std::time::UNIX_EPOCH);
        match latest.get(&key) {
            Some((t, prev)) if *t > mtime => warn!("duplicate run {:?}: keeping {}, ignoring {}", key, prev.0.display(), run.0.display()),
            Some((_, prev)) => {
                warn!("duplicate run {:?}: keeping {}, ignoring {}", key, run.0.display(), prev.0.display());
                latest.insert(key, (mtime, run));
            }
            None => {
                latest.insert(key, (mtime, run));
            }
        }
    }
    let kept: Vec<_> = latest.into_values().map(|(_, r)| r).collect();
    let dropped = total - kept.len();
    Ok((kept, dropped))
}

/// Per-(task, method) means, tasks in declaration order.
pub fn per_task(reports: &[MetricsReport]) -> Vec<TaskRow> {
    let mut out = Vec::new();
    for task in Task::ALL {
        let rows: Vec<MetricsReport> = reports.iter().filter(|r| r.task == task).cloned().collect();
        for a in aggregate(&rows) {
            out.push(TaskRow {
                task,
                method: a.method,
                clean_accuracy: a.clean_accuracy,
                robustness: a.robustness,
                reasoning_consistency: a.reasoning_consistency,
                detection_f1: a.detection_f1,
                grad_alignment: a.grad_alignment,
                runs: a.runs,
            });
        }
    }
    out
}

/// `w = exp(-lambda S)` on `S = 0, 0.01, .., 2`.
pub fn weight_curve(lambda: f64) -> Vec<(f64, f64)> {
    (0..=200).map(|i| {
        let s = i as f64 * 0.01;
        (s, (-lambda * s).exp())
    }).collect()
}

#[derive(Deserialize)]
struct DumpRow {
    sample_index: usize,
    alignment: f64,
    score: f64,
    shortcut_consistent: bool,
}

pub fn read_score_dump(path: &Path) -> Result<Vec<ScorePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let d: DumpRow = row?;
        out.push(ScorePoint { sample_index: d.sample_index, score: d.score, alignment: d.alignment, shortcut_consistent: d.shortcut_consistent });
    }
    Ok(out)
}

/// Pearson r of score against the shortcut indicator; `None` on zero variance.
pub fn score_pearson(points: &[ScorePoint]) -> Result<Option<f64>> {
    let x: Vec<f64> = points.iter().map(|p| p.score).collect();
    let y: Vec<f64> = points.iter().map(|p| p.shortcut_consistent as u8 as f64).collect();
    match pearson(&x, &y) {
        Ok(r) => Ok(Some(r)),
        Err(CoreError::ZeroVariance) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Warmup diagnostics of the first SART run, math task preferred.
pub fn figure_source(runs: &[(PathBuf, RunSpec, MetricsReport)]) -> Result<Option<FigureSource>> {
    let mut candidates: Vec<&(PathBuf, RunSpec, MetricsReport)> =
        runs.iter().filter(|(d, s, _)| s.train.method == Method::Sart && d.join(store::WARMUP_DIAG_CSV).exists()).collect();
    candidates.sort_by_key(|(_, s, _)| (s.task != Task::MathArithmetic, s.train.seed));
    let Some((dir, _, _)) = candidates.first() else { return Ok(None) };
    let points = read_score_dump(&dir.join(store::WARMUP_DIAG_CSV))?;
    let pearson_r = score_pearson(&points)?;
    Ok(Some(FigureSource { run: dir.clone(), points, pearson_r }))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every table and figure data file into `out`; SVG figures too when `svg`.
pub fn write_report(store: &ResultStore, out: &Path, svg: bool) -> Result<ReportSummary> {
    std::fs::create_dir_all(out)?;
    let (runs, duplicates_dropped) = collect(store)?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.2.clone()).collect();
    let agg: Vec<AggregateRow> = aggregate(&reports);
    let mut files = vec![out.join(REPORT_CSV), out.join(AGGREGATE_CSV), out.join(PER_TASK_CSV), out.join(FIG5C_CSV)];
    write_report_csv(&files[0], &reports)?;
    write_aggregate_csv(&files[1], &agg)?;
    write_rows(&files[2], per_task(&reports))?;
    let curve = weight_curve(CURVE_LAMBDA);
    #[derive(Serialize)]
    struct CurveRow {
        score: f64,
        weight: f64,
    }
    write_rows(&files[3], curve.iter().map(|&(score, weight)| CurveRow { score, weight }))?;

    let source = figure_source(&runs)?;
    if let Some(src) = &source {
        let a = out.join(FIG5A_CSV);
        write_rows(&a, &src.points)?;
        files.push(a);
        #[derive(Serialize)]
        struct AlignRow {
            alignment: f64,
            shortcut_consistent: bool,
        }
        let b = out.join(FIG5B_CSV);
        write_rows(&b, src.points.iter().map(|p| AlignRow { alignment: p.alignment, shortcut_consistent: p.shortcut_consistent }))?;
        files.push(b);
    }
    if svg {
        files.extend(crate::plot::render_all(out, source.as_ref(), &curve)?);
    }
    Ok(ReportSummary {
        runs: reports.len(),
        duplicates_dropped,
        methods: agg.iter().map(|a| a.method.clone()).collect(),
        figure_run: source.as_ref().map(|s| s.run.clone()),
        pearson_r: source.and_then(|s| s.pearson_r),
        files,
    })
}
