//! File-per-run result persistence keyed by a configuration hash.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sart_core::data::{LabelMode, Task};
use sart_core::metrics::MetricsReport;
use sart_core::par::Exec;
use sart_core::trainer::{Method, TrainConfig};

/// Everything that determines a run's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: Task,
    pub label_mode: LabelMode,
    pub data_seed: u64,
    /// Row label in reports: a method name or an ablation variant.
    pub name: String,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn new(task: Task, label_mode: LabelMode, method: Method, seed: u64, base: &TrainConfig) -> Self {
        let train = TrainConfig { method, seed, ..base.clone() };
        Self { task, label_mode, data_seed: seed, name: method.name().to_string(), train }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    /// The execution strategy does not change results and is left out.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.train.exec = Exec::default();
        let bytes = serde_json::to_vec(&canon).expect("run spec serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}-seed{}-{}", self.task.name(), self.name, self.train.seed, self.hash())
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PARAMS_FILE: &str = "params.ckpt";
pub const LOG_FILE: &str = "train_log.json";
pub const LOG_CSV: &str = "train_log.csv";
pub const EVENTS_CSV: &str = "events.csv";
pub const DIAG_CSV: &str = "diagnostics.csv";
pub const WARMUP_DIAG_CSV: &str = "warmup_diagnostics.csv";

/// A results directory: one subdirectory per run under `runs/`.
#[derive(Clone, Debug)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("runs")).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, spec: &RunSpec) -> PathBuf {
        self.root.join("runs").join(spec.dir_name())
    }

    /// Stored report of a completed run with exactly this spec.
    pub fn load(&self, spec: &RunSpec) -> Option<MetricsReport> {
        let dir = self.run_dir(spec);
        let stored: RunSpec = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE)).ok()?).ok()?;
        if stored.hash() != spec.hash() {
            return None;
        }
        serde_json::from_str(&fs::read_to_string(dir.join(METRICS_FILE)).ok()?).ok()
    }

    /// Completed runs as `(run directory, spec, report)`, sorted by directory name.
    pub fn completed(&self) -> Result<Vec<(PathBuf, RunSpec, MetricsReport)>> {
        let mut out = Vec::new();
        let runs = self.root.join("runs");
        if !runs.is_dir() {
            return Ok(out);
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for dir in dirs {
            let (Ok(cfg), Ok(met)) = (fs::read_to_string(dir.join(CONFIG_FILE)), fs::read_to_string(dir.join(METRICS_FILE))) else {
                continue;
            };
            let spec: RunSpec = serde_json::from_str(&cfg).with_context(|| format!("parsing {}", dir.join(CONFIG_FILE).display()))?;
            let report: MetricsReport = serde_json::from_str(&met).with_context(|| format!("parsing {}", dir.join(METRICS_FILE).display()))?;
            out.push((dir, spec, report));
        }
        Ok(out)
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}
