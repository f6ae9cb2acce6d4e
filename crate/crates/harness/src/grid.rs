//! Hyperparameter grid over `(lambda, gamma, rho)` with marginal tables.

use std::path::Path;

use anyhow::Result;
use log::warn;
use serde::{Deserialize, Serialize};

use sart_core::data::{LabelMode, Task};
use sart_core::trainer::{Method, TrainConfig};

use crate::experiment;
use crate::store::{ResultStore, RunSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Weights of accuracy and robustness in the combined score.
    pub weights: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lambdas: vec![1.0, 1.5, 2.0, 3.0, 5.0],
            gammas: vec![0.3, 0.5, 0.8, 1.0],
            rhos: vec![0.1, 0.3, 0.5, 0.7],
            weights: (0.4, 0.6),
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.lambdas.len() * self.gammas.len() * self.rhos.len());
        for &l in &self.lambdas {
            for &g in &self.gammas {
                for &r in &self.rhos {
                    out.push((l, g, r));
                }
            }
        }
        out
    }

    pub fn combined(&self, accuracy: f64, robustness: f64) -> f64 {
        self.weights.0 * accuracy + self.weights.1 * robustness
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub seed: u64,
    pub clean_accuracy: Option<f64>,
    pub robustness: Option<f64>,
    pub combined: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub param: String,
    pub value: f64,
    pub clean_accuracy: f64,
    pub robustness: f64,
    pub combined: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub marginals: Vec<Marginal>,
}

/// Spec of one grid cell.
pub fn cell_spec(task: Task, label_mode: LabelMode, base: &TrainConfig, seed: u64, (lambda, gamma, rho): (f64, f64, f64)) -> RunSpec {
    let mut spec = RunSpec::new(task, label_mode, Method::Sart, seed, base);
    spec.train.sart.lambda = lambda;
    spec.train.sart.gamma = gamma;
    spec.train.sart.rho = rho;
    spec.name = format!("sart_l{lambda}_g{gamma}_r{rho}");
    spec
}

/// Runs every cell for every seed; failed cells are recorded and skipped.
/// Give the grid its own store so its runs stay out of the method tables.
pub fn run_grid(store: &ResultStore, task: Task, label_mode: LabelMode, base: &TrainConfig, grid: &GridSpec, seeds: &[u64]) -> Result<GridResult> {
    let mut cells = Vec::new();
    for &seed in seeds {
        let data = experiment::load_data(task, label_mode, seed, None)?;
        for c in grid.cells() {
            let spec = cell_spec(task, label_mode, base, seed, c);
            let (lambda, gamma, rho) = c;
            let cell = match experiment::run(store, &spec, &data) {
                Ok(r) => GridCell {
                    lambda,
                    gamma,
                    rho,
                    seed,
                    clean_accuracy: Some(r.clean_accuracy),
                    robustness: Some(r.robustness),
                    combined: Some(grid.combined(r.clean_accuracy, r.robustness)),
                    error: None,
                },
                Err(e) => {
                    warn!("grid cell {c:?} seed {seed} failed: {e:#}");
                    GridCell { lambda, gamma, rho, seed, clean_accuracy: None, robustness: None, combined: None, error: Some(format!("{e:#}")) }
                }
            };
            cells.push(cell);
        }
    }
    let marginals = marginals(&cells, grid);
    Ok(GridResult { cells, marginals })
}

/// Means over the other two parameters (and seeds) for each value of each
/// parameter, over successful cells.
pub fn marginals(cells: &[GridCell], grid: &GridSpec) -> Vec<Marginal> {
    let mut out = Vec::new();
    let params: [(&str, &[f64], fn(&GridCell) -> f64); 3] =
        [("lambda", &grid.lambdas, |c| c.lambda), ("gamma", &grid.gammas, |c| c.gamma), ("rho", &grid.rhos, |c| c.rho)];
    for (name, values, get) in params {
        for &v in values {
            let ok: Vec<&GridCell> = cells.iter().filter(|c| get(c) == v && c.error.is_none()).collect();
            let n = ok.len().max(1) as f64;
            let acc = ok.iter().filter_map(|c| c.clean_accuracy).sum::<f64>() / n;
            let rob = ok.iter().filter_map(|c| c.robustness).sum::<f64>() / n;
            out.push(Marginal {
                param: name.to_string(),
                value: v,
                clean_accuracy: acc,
                robustness: rob,
                combined: grid.combined(acc, rob),
                cells: ok.len(),
            });
        }
    }
    out
}

/// `grid_cells.csv` ranked by combined score and `grid_marginals.csv`.
pub fn write_grid(dir: &Path, result: &GridResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ranked = result.cells.clone();
    ranked.sort_by(|a, b| b.combined.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.combined.unwrap_or(f64::NEG_INFINITY)));
    let mut w = csv::Writer::from_path(dir.join("grid_cells.csv"))?;
    for c in &ranked {
        w.serialize(c)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("grid_marginals.csv"))?;
    for m in &result.marginals {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
