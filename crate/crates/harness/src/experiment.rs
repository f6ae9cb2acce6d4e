//! Running single cells: train, evaluate and persist.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;

use sart_core::data::{generate_dataset, read_dataset, DatasetSplit, LabelMode, Task, TaskSpec};
use sart_core::diagnostics::write_diagnostics_csv;
use sart_core::metrics::{evaluate_named, MetricsReport};
use sart_core::model::Params;
use sart_core::surgery::write_events_csv;
use sart_core::trainer::{train, Ablation, Method, TrainConfig, TrainLog};

use crate::store::{self, write_atomic, ResultStore, RunSpec};

/// Reads a dataset directory, or generates the split in memory.
pub fn load_data(task: Task, label_mode: LabelMode, seed: u64, dir: Option<&Path>) -> Result<DatasetSplit> {
    match dir {
        Some(d) => {
            let data = read_dataset(d).with_context(|| format!("reading dataset {}", d.display()))?;
            anyhow::ensure!(data.spec.task == task, "dataset {} holds task {}, not {}", d.display(), data.spec.task.name(), task.name());
            Ok(data)
        }
        None => Ok(generate_dataset(&TaskSpec::new(task).with_label_mode(label_mode), seed)?),
    }
}

/// The data a spec trains on.
pub fn data_for(spec: &RunSpec) -> Result<DatasetSplit> {
    load_data(spec.task, spec.label_mode, spec.data_seed, None)
}

/// Spec of an ablation variant; the full variant is the plain SART run.
pub fn ablation_spec(task: Task, label_mode: LabelMode, seed: u64, base: &TrainConfig, variant: Ablation) -> RunSpec {
    let mut spec = RunSpec::new(task, label_mode, Method::Sart, seed, &variant.apply(base));
    if variant != Ablation::Full {
        spec.name = format!("sart_{}", variant.name());
    }
    spec
}

/// Report of `spec`, training it unless the store already holds it.
pub fn run(store: &ResultStore, spec: &RunSpec, data: &DatasetSplit) -> Result<MetricsReport> {
    if let Some(r) = store.load(spec) {
        info!("reusing {}", spec.dir_name());
        return Ok(r);
    }
    let dir = store.run_dir(spec);
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(store::CONFIG_FILE), &serde_json::to_vec_pretty(spec)?)?;
    let (params, log) = match shared_sft(store, spec) {
        Some(pair) => pair,
        None => {
            info!("training {}", spec.dir_name());
            let mut cfg = spec.train.clone();
            cfg.divergence_dump = Some(dir.join("divergence.json"));
            train(cfg, data).with_context(|| format!("training {}", spec.dir_name()))?
        }
    };
    let report = evaluate_named(&params, &log, &spec.train, data, &spec.name)?;
    persist(&dir, &params, &log, data)?;
    write_atomic(&dir.join(store::METRICS_FILE), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Self-consistency trains exactly like SFT: reuse a stored SFT run.
fn shared_sft(store: &ResultStore, spec: &RunSpec) -> Option<(Params, TrainLog)> {
    if spec.train.method != Method::SelfConsistencyEval {
        return None;
    }
    let mut sft = spec.clone();
    sft.train.method = Method::Sft;
    sft.name = Method::Sft.name().to_string();
    store.load(&sft)?;
    let dir = store.run_dir(&sft);
    let params = Params::load(&dir.join(store::PARAMS_FILE)).ok()?;
    let log: TrainLog = serde_json::from_str(&fs::read_to_string(dir.join(store::LOG_FILE)).ok()?).ok()?;
    info!("self-consistency reuses {}", sft.dir_name());
    Some((params, log))
}

fn persist(dir: &Path, params: &Params, log: &TrainLog, data: &DatasetSplit) -> Result<()> {
    params.save(&dir.join(store::PARAMS_FILE))?;
    write_atomic(&dir.join(store::LOG_FILE), &serde_json::to_vec_pretty(log)?)?;
    let mut w = csv::Writer::from_path(dir.join(store::LOG_CSV))?;
    for e in &log.epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    if !log.events.is_empty() {
        write_events_csv(&dir.join(store::EVENTS_CSV), &log.events)?;
    }
    let flags: Vec<bool> = data.train.iter().map(|s| s.shortcut_consistent).collect();
    if let Some(d) = &log.final_diagnostics {
        write_diagnostics_csv(&dir.join(store::DIAG_CSV), d, &flags)?;
    }
    if let Some(d) = &log.warmup_diagnostics {
        write_diagnostics_csv(&dir.join(store::WARMUP_DIAG_CSV), d, &flags)?;
    }
    Ok(())
}

/// Re-evaluates a stored run from its checkpoint.
pub fn evaluate_run(dir: &Path, data: Option<&DatasetSplit>) -> Result<MetricsReport> {
    let spec: RunSpec = serde_json::from_str(&fs::read_to_string(dir.join(store::CONFIG_FILE)).with_context(|| format!("no run at {}", dir.display()))?)?;
    let params = Params::load(&dir.join(store::PARAMS_FILE))?;
    let log: TrainLog = serde_json::from_str(&fs::read_to_string(dir.join(store::LOG_FILE))?)?;
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = data_for(&spec)?;
            &owned
        }
    };
    let mut log = log;
    log.final_diagnostics = read_diagnostics(&dir.join(store::DIAG_CSV))?;
    log.warmup_diagnostics = read_diagnostics(&dir.join(store::WARMUP_DIAG_CSV))?;
    Ok(evaluate_named(&params, &log, &spec.train, data, &spec.name)?)
}

#[derive(serde::Deserialize)]
struct DiagRow {
    alignment: f64,
    concentration: f64,
    score: f64,
    weight: f64,
}

/// Diagnostics dump written by a run, if present.
pub fn read_diagnostics(path: &Path) -> Result<Option<Vec<sart_core::diagnostics::ShortcutDiagnostics>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<DiagRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(Some(
        rows.into_iter()
            .map(|d| sart_core::diagnostics::ShortcutDiagnostics {
                alignment: d.alignment,
                concentration: d.concentration,
                score: d.score,
                weight: d.weight,
                degenerate: false,
            })
            .collect(),
    ))
}
