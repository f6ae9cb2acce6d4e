//! Per-epoch wall-clock cost of SART relative to SFT.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sart_core::data::{DatasetSplit, Task};
use sart_core::trainer::{train, Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub task: Task,
    pub params: usize,
    pub sft_epoch_seconds: f64,
    pub sart_epoch_seconds: f64,
    pub ratio: f64,
    /// Projected wall clock of a full SART run with `epochs` epochs.
    pub epochs: usize,
    pub projected_run_seconds: f64,
}

/// Times the second epoch of a two-epoch SFT run and of a two-epoch SART run
/// whose first epoch is the SFT warmup, so both timed epochs start from the
/// same parameters and learning-rate schedule.
pub fn measure(data: &DatasetSplit, base: &TrainConfig) -> Result<CostReport> {
    let mut cfg = TrainConfig { epochs: 2, eval_each_epoch: false, record_diagnostics: false, ..base.clone() };
    cfg.sart.warmup_epochs = 1;
    let timed = |method: Method| -> Result<f64> {
        let (_, log) = train(TrainConfig { method, ..cfg.clone() }, data).with_context(|| format!("timing {method}"))?;
        Ok(log.epochs[1].seconds)
    };
    let sft = timed(Method::Sft)?;
    let sart = timed(Method::Sart)?;
    let warm = base.sart.warmup_epochs.min(base.epochs);
    Ok(CostReport {
        task: data.spec.task,
        params: base.model.param_count(),
        sft_epoch_seconds: sft,
        sart_epoch_seconds: sart,
        ratio: sart / sft,
        epochs: base.epochs,
        projected_run_seconds: warm as f64 * sft + (base.epochs - warm) as f64 * sart,
    })
}
