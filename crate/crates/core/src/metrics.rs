//! Evaluation metrics and report files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{answer_from_reasoning, DatasetSplit, Sample, Task};
use crate::diagnostics::{alignment, validation_gradient, ShortcutDiagnostics};
use crate::error::{invalid, Error, Result};
use crate::model::{self, Params};
use crate::numeric::{Rng, Stream};
use crate::par::Exec;
use crate::trainer::{Method, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub task: Task,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub robustness: f64,
    pub reasoning_consistency: f64,
    pub detection_f1: Option<f64>,
    pub grad_alignment: f64,
    pub pearson_r: Option<f64>,
    pub runtime_seconds: f64,
    pub seconds_per_epoch: f64,
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Teacher-forced answer accuracy in percent.
pub fn accuracy(params: &Params, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    accuracy_of(&model::predict_answers(params, samples, exec)?, samples)
}

/// Accuracy in percent of predicted answer tokens.
pub fn accuracy_of(predictions: &[usize], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if predictions.len() != samples.len() {
        return Err(invalid("prediction and sample counts differ"));
    }
    Ok(percent(predictions.iter().zip(samples).filter(|(p, s)| **p == s.answer_token()).count(), samples.len()))
}

/// Accuracy of the majority vote over `n` sampled completions per sample.
pub fn self_consistency_accuracy(params: &Params, samples: &[Sample], n: usize, temperature: f64, rng: &mut Rng) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let mut hits = 0;
    for chunk in samples.chunks(128) {
        let votes = model::sample_completions_batch(params, chunk, n, temperature, rng)?;
        hits += votes.iter().zip(chunk).filter(|(v, s)| model::majority_vote(v) == Some(s.answer_token())).count();
    }
    Ok(percent(hits, samples.len()))
}

/// Whether teacher-forced predictions reproduce the reasoning span exactly
/// and the predicted answer follows from the predicted intermediate values.
pub fn is_consistent(task: Task, sample: &Sample, predicted: &[usize]) -> bool {
    let n_r = sample.reasoning_span.len();
    if predicted.len() != n_r + sample.answer_span.len() {
        return false;
    }
    let truth = &sample.token_ids[sample.reasoning_span.range()];
    if predicted[..n_r] != *truth {
        return false;
    }
    answer_from_reasoning(task, &predicted[..n_r]).map(|a| a as usize) == Some(predicted[n_r])
}

/// Reasoning consistency in percent.
pub fn reasoning_consistency(params: &Params, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if samples.iter().any(|s| s.reasoning_span.is_empty()) {
        return Err(Error::Span("reasoning span is empty".into()));
    }
    let preds = model::predict_output_tokens(params, samples, exec)?;
    Ok(percent(samples.iter().zip(&preds).filter(|(s, p)| is_consistent(s.task, s, p)).count(), samples.len()))
}

/// F1 of the predictions `flags` against `truth`; `None` without positives.
pub fn f1_score(flags: &[bool], truth: &[bool]) -> Result<Option<f64>> {
    if flags.len() != truth.len() {
        return Err(invalid("flag and truth lengths differ"));
    }
    if !truth.iter().any(|&t| t) {
        return Ok(None);
    }
    let tp = flags.iter().zip(truth).filter(|(f, t)| **f && **t).count() as f64;
    let fp = flags.iter().zip(truth).filter(|(f, t)| **f && !**t).count() as f64;
    let fneg = flags.iter().zip(truth).filter(|(f, t)| !**f && **t).count() as f64;
    Ok(Some(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) }))
}

/// Detection F1 with a sample flagged iff its score is positive.
pub fn detection_f1(scores: &[ShortcutDiagnostics], truth: &[bool]) -> Result<Option<f64>> {
    let flags: Vec<bool> = scores.iter().map(|d| d.score > 0.0).collect();
    f1_score(&flags, truth)
}

/// Cosine between the mean train gradient and the mean validation gradient.
pub fn grad_alignment_metric(params: &Params, train: &[Sample], val: &[Sample], exec: Exec) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let g_t = validation_gradient(params, train, exec)?;
    let g_v = validation_gradient(params, val, exec)?;
    alignment(&g_t, &g_v)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid("pearson inputs differ in length"));
    }
    if x.len() < 3 {
        return Err(invalid("pearson needs at least three points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson r between shortcut scores and the shortcut-consistency indicator.
pub fn score_correlation(scores: &[ShortcutDiagnostics], train: &[Sample]) -> Result<f64> {
    let s: Vec<f64> = scores.iter().map(|d| d.score).collect();
    let t: Vec<f64> = train.iter().map(|s| s.shortcut_consistent as u8 as f64).collect();
    pearson(&s, &t)
}

/// Full report for trained parameters.
pub fn evaluate(params: &Params, log: &TrainLog, cfg: &TrainConfig, data: &DatasetSplit) -> Result<MetricsReport> {
    evaluate_named(params, log, cfg, data, cfg.method.name())
}

pub fn evaluate_named(params: &Params, log: &TrainLog, cfg: &TrainConfig, data: &DatasetSplit, name: &str) -> Result<MetricsReport> {
    let exec = cfg.exec;
    let (clean, robust) = if cfg.method == Method::SelfConsistencyEval {
        let mp = cfg.method_params;
        let mut rng = Rng::new(cfg.seed, Stream::Sampling);
        (
            self_consistency_accuracy(params, &data.test_clean, mp.sc_samples, mp.sc_temperature, &mut rng)?,
            self_consistency_accuracy(params, &data.test_perturbed, mp.sc_samples, mp.sc_temperature, &mut rng)?,
        )
    } else {
        (accuracy(params, &data.test_clean, exec)?, accuracy(params, &data.test_perturbed, exec)?)
    };
    let truth: Vec<bool> = data.train.iter().map(|s| s.shortcut_consistent).collect();
    let detection_f1 = match (&log.final_diagnostics, &log.flagged) {
        (Some(d), _) => detection_f1(d, &truth)?,
        (None, Some(idx)) => {
            let mut flags = vec![false; truth.len()];
            idx.iter().for_each(|&i| flags[i] = true);
            f1_score(&flags, &truth)?
        }
        _ => None,
    };
    let pearson_r = match &log.warmup_diagnostics {
        Some(d) => match score_correlation(d, &data.train) {
            Ok(r) => Some(r),
            Err(Error::ZeroVariance) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let n_epochs = log.epochs.len().max(1) as f64;
    Ok(MetricsReport {
        method: name.to_string(),
        task: data.spec.task,
        seed: cfg.seed,
        clean_accuracy: clean,
        robustness: robust,
        reasoning_consistency: reasoning_consistency(params, &data.test_clean, exec)?,
        detection_f1,
        grad_alignment: grad_alignment_metric(params, &data.train, &data.val, exec)?,
        pearson_r,
        runtime_seconds: log.seconds,
        seconds_per_epoch: log.epochs.iter().map(|e| e.seconds).sum::<f64>() / n_epochs,
    })
}

pub fn write_report_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| invalid(e.to_string()))?;
    for r in reports {
        w.serialize(r).map_err(|e| invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| invalid(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| invalid(e.to_string()))).collect()
}

/// Per-method means over tasks and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub clean_accuracy: f64,
    pub robustness: f64,
    pub reasoning_consistency: f64,
    pub detection_f1: Option<f64>,
    pub grad_alignment: f64,
    pub runs: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Method order of the aggregate table.
pub const TABLE_ORDER: [Method; 8] = [
    Method::Sft,
    Method::SelfConsistencyEval,
    Method::DataFiltering,
    Method::Jtt,
    Method::Focal,
    Method::GroupDro,
    Method::Lff,
    Method::Sart,
];

/// Rows grouped by method: known methods in [`TABLE_ORDER`], then any other
/// names in order of first appearance.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        if !groups.contains_key(r.method.as_str()) {
            order.push(&r.method);
        }
        groups.entry(&r.method).or_default().push(r);
    }
    let rank = |m: &str| TABLE_ORDER.iter().position(|t| t.name() == m).unwrap_or(TABLE_ORDER.len());
    order.sort_by_key(|m| rank(m));
    order
        .into_iter()
        .map(|m| {
            let g = &groups[m];
            AggregateRow {
                method: m.to_string(),
                clean_accuracy: mean(g.iter().map(|r| r.clean_accuracy)).unwrap_or(0.0),
                robustness: mean(g.iter().map(|r| r.robustness)).unwrap_or(0.0),
                reasoning_consistency: mean(g.iter().map(|r| r.reasoning_consistency)).unwrap_or(0.0),
                detection_f1: mean(g.iter().filter_map(|r| r.detection_f1)),
                grad_alignment: mean(g.iter().map(|r| r.grad_alignment)).unwrap_or(0.0),
                runs: g.len(),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| invalid(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
