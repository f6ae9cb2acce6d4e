//! Shortcut detection signals: validation gradient, non-transfer alignment
//! `A(s)`, answer-gradient concentration `R(s)`, score `S(s)` and weight
//! `w(s) = exp(-lambda S)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Forward, LossBreakdown, NormScope, Params, Region, Scope};
use crate::numeric::{Real, TokenLossKind};
use crate::par::{self, Exec};
use crate::surgery::{GradScope, SartConfig};

/// Norm below which a gradient counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShortcutDiagnostics {
    pub alignment: f64,
    pub concentration: f64,
    pub score: f64,
    pub weight: f64,
    /// Concentration had a zero denominator and was set to 0.5.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Concentration {
    pub value: f64,
    pub degenerate: bool,
}

/// Micro-batch size for gradient passes.
pub const GRAD_CHUNK: usize = 64;

/// Gradient of the mean full-output-region loss over `val`.
pub fn validation_gradient(params: &Params, val: &[Sample], exec: Exec) -> Result<Vec<f32>> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let n = val.len() as f64;
    let chunks: Vec<&[Sample]> = val.chunks(GRAD_CHUNK).collect();
    let parts = par::try_map(exec, &chunks, |_, chunk| -> Result<Vec<f32>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let fwd = Forward::<f32>::new(params, &refs, true, TokenLossKind::CrossEntropy)?;
        fwd.gradient(&fwd.seed(Scope::Full, &vec![1.0 / n; refs.len()])?)
    })?;
    let mut acc = vec![0.0f64; params.len()];
    for p in &parts {
        acc.iter_mut().zip(p).for_each(|(a, &g)| *a += g as f64);
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("validation_gradient"));
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Cosine similarity; 0 when either norm is below [`ZERO_NORM`].
pub fn alignment<T: Real>(g_s: &[T], g_v: &[T]) -> Result<f64> {
    alignment_masked(g_s, g_v, None)
}

/// Cosine similarity over the coordinates selected by `mask`.
pub fn alignment_masked<T: Real>(g_s: &[T], g_v: &[T], mask: Option<&[bool]>) -> Result<f64> {
    if g_s.len() != g_v.len() || mask.is_some_and(|m| m.len() != g_s.len()) {
        return Err(Error::Layout(format!("gradient lengths {} and {} differ", g_s.len(), g_v.len())));
    }
    let (mut d, mut a, mut b) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..g_s.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (x, y) = (g_s[i].to_f64(), g_v[i].to_f64());
        d += x * y;
        a += x * x;
        b += y * y;
    }
    let (na, nb) = (a.sqrt(), b.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Answer share of the per-token gradient norm over the output region.
pub fn concentration(b: &LossBreakdown) -> Result<Concentration> {
    let norms = b.per_token_grad_norm.as_ref().ok_or_else(|| Error::Invalid("breakdown has no per-token gradient norms".into()))?;
    if !b.is_answer.iter().any(|&a| a) {
        return Err(Error::Span("empty answer span".into()));
    }
    let ans: f64 = norms.iter().zip(&b.is_answer).filter(|(_, &a)| a).map(|(n, _)| n).sum();
    let all: f64 = norms.iter().sum();
    Ok(concentration_from(ans, all))
}

fn concentration_from(ans: f64, all: f64) -> Concentration {
    if all <= 0.0 || !all.is_finite() {
        return Concentration { value: 0.5, degenerate: true };
    }
    Concentration { value: (ans / all).clamp(0.0, 1.0), degenerate: false }
}

/// `S = alpha max(0, tau_A - A) + beta max(0, R - tau_R)`, `w = exp(-lambda S)`.
pub fn shortcut_score(alignment: f64, concentration: f64, cfg: &SartConfig) -> ShortcutDiagnostics {
    let score = cfg.alpha * (cfg.tau_a - alignment).max(0.0) + cfg.beta * (concentration - cfg.tau_r).max(0.0);
    let weight = (-cfg.lambda * score).exp();
    ShortcutDiagnostics { alignment, concentration, score, weight, degenerate: false }
}

/// Per-sample signals of one micro-batch.
pub struct BatchSignals<T> {
    /// Additive answer part of each sample's gradient:
    /// `n_ans / (n_ans + n_reason)` times the mean answer-token gradient.
    pub g_ans: Vec<Vec<T>>,
    /// Additive reasoning part, so that `g_ans + g_reason` is the gradient of
    /// the mean output-region loss.
    pub g_reason: Vec<Vec<T>>,
    pub alignment: Vec<f64>,
    pub concentration: Vec<Concentration>,
}

impl<T: Real> BatchSignals<T> {
    pub fn full_gradient(&self, s: usize) -> Vec<T> {
        self.g_ans[s].iter().zip(&self.g_reason[s]).map(|(a, r)| T::from_f64(a.to_f64() + r.to_f64())).collect()
    }
}

/// Scope-split per-sample gradients and the `A`, `R` signals for the samples
/// of `fwd`, using two per-sample backward passes.
pub fn batch_signals<T: Real>(fwd: &Forward<T>, g_v: &[T], mask: Option<&[bool]>, norm_scope: NormScope) -> Result<BatchSignals<T>> {
    let n = fwd.n_samples();
    let na = fwd.counts(Scope::Answer);
    let nr = fwd.counts(Scope::Reasoning);
    if let Some(s) = na.iter().position(|&c| c == 0) {
        return Err(Error::Span(format!("sample {s} has an empty answer span")));
    }
    // adjoints chosen so that the two parts add up to the full gradient
    let part = |scope: Scope| -> Vec<f64> {
        let mut seed = vec![0.0; fwd.regions().len()];
        for s in 0..n {
            let total = (na[s] + nr[s]) as f64;
            for r in fwd.rows(s) {
                let reg = fwd.regions()[r];
                if (scope == Scope::Answer && reg == Region::Answer) || (scope == Scope::Reasoning && reg == Region::Reasoning) {
                    seed[r] = 1.0 / total;
                }
            }
        }
        seed
    };
    let seed_a = part(Scope::Answer);
    let seed_r = part(Scope::Reasoning);
    let (g_ans, sq_a) = fwd.per_sample_gradients(&seed_a)?;
    let (g_reason, sq_r) = if nr.iter().any(|&c| c > 0) {
        fwd.per_sample_gradients(&seed_r)?
    } else {
        (vec![vec![T::ZERO; g_v.len()]; n], vec![0.0; seed_r.len()])
    };
    let norms: Vec<f64> = match norm_scope {
        NormScope::Tail => (0..seed_a.len())
            .map(|r| {
                if seed_a[r] > 0.0 {
                    sq_a[r].sqrt() / seed_a[r]
                } else if seed_r[r] > 0.0 {
                    sq_r[r].sqrt() / seed_r[r]
                } else {
                    0.0
                }
            })
            .collect(),
        NormScope::Full => fwd.full_token_norms()?,
    };
    let mut alignment = Vec::with_capacity(n);
    let mut concentration = Vec::with_capacity(n);
    for s in 0..n {
        let g: Vec<T> = g_ans[s].iter().zip(&g_reason[s]).map(|(a, r)| T::from_f64(a.to_f64() + r.to_f64())).collect();
        alignment.push(alignment_masked(&g, g_v, mask)?);
        let (mut ans, mut all) = (0.0, 0.0);
        for r in fwd.rows(s) {
            match fwd.regions()[r] {
                Region::Answer => {
                    ans += norms[r];
                    all += norms[r];
                }
                Region::Reasoning => all += norms[r],
                Region::None => {}
            }
        }
        concentration.push(concentration_from(ans, all));
    }
    Ok(BatchSignals { g_ans, g_reason, alignment, concentration })
}

/// Diagnostics for every sample, computed on the current parameters.
pub fn score_dataset(params: &Params, train: &[Sample], g_v: &[f32], cfg: &SartConfig, exec: Exec) -> Result<Vec<ShortcutDiagnostics>> {
    if g_v.len() != params.len() {
        return Err(Error::Layout(format!("validation gradient of {} for {} parameters", g_v.len(), params.len())));
    }
    let mask = (cfg.grad_scope == GradScope::HeadRestricted).then(|| params.layout().tail_mask());
    let chunks: Vec<&[Sample]> = train.chunks(GRAD_CHUNK).collect();
    let parts = par::try_map(exec, &chunks, |_, chunk| -> Result<Vec<ShortcutDiagnostics>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let fwd = Forward::<f32>::new(params, &refs, true, TokenLossKind::CrossEntropy)?;
        let sig = batch_signals(&fwd, g_v, mask.as_deref(), cfg.norm_scope)?;
        Ok((0..refs.len())
            .map(|s| {
                let c = sig.concentration[s];
                ShortcutDiagnostics { degenerate: c.degenerate, ..shortcut_score(sig.alignment[s], c.value, cfg) }
            })
            .collect())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Validation gradient with its refresh bookkeeping.
#[derive(Clone, Debug)]
pub struct ValidationGradientCache {
    gradient: Option<Vec<f32>>,
    step_computed: usize,
    period: usize,
}

impl ValidationGradientCache {
    pub fn new(period: usize) -> Self {
        Self { gradient: None, step_computed: 0, period: period.max(1) }
    }

    pub fn is_stale(&self, step: usize) -> bool {
        self.gradient.is_none() || step >= self.step_computed + self.period
    }

    /// Current gradient, recomputed when stale.
    pub fn get(&mut self, params: &Params, val: &[Sample], step: usize, exec: Exec) -> Result<&[f32]> {
        if self.is_stale(step) {
            self.gradient = Some(validation_gradient(params, val, exec)?);
            self.step_computed = step;
        }
        Ok(self.gradient.as_deref().unwrap())
    }

    pub fn step_computed(&self) -> usize {
        self.step_computed
    }

    pub fn invalidate(&mut self) {
        self.gradient = None;
    }
}

#[derive(Serialize)]
struct DiagRow {
    sample_index: usize,
    alignment: f64,
    concentration: f64,
    score: f64,
    weight: f64,
    shortcut_consistent: bool,
}

/// CSV with one row per train sample.
pub fn write_diagnostics_csv(path: &Path, diags: &[ShortcutDiagnostics], flags: &[bool]) -> Result<()> {
    if diags.len() != flags.len() {
        return Err(Error::Invalid(format!("{} diagnostics for {} flags", diags.len(), flags.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
    for (i, (d, &f)) in diags.iter().zip(flags).enumerate() {
        let row = DiagRow {
            sample_index: i,
            alignment: d.alignment,
            concentration: d.concentration,
            score: d.score,
            weight: d.weight,
            shortcut_consistent: f,
        };
        w.serialize(row).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
