//! Gradient surgery: removal of the validation-parallel component, damping of
//! answer-token gradients, and the subspace-constrained minimax update.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::NormScope;
use crate::numeric::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurgeryMode {
    Off,
    #[default]
    Projection,
    Minimax,
}

/// Parameter set over which sample and validation gradients are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    #[default]
    Full,
    /// Final feed-forward sublayer, final norm and head only.
    HeadRestricted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimaxConfig {
    /// Perturbation step; the learning rate when absent.
    pub eta1: Option<f64>,
    /// Parameter step; the learning rate when absent.
    pub eta2: Option<f64>,
    /// Subspace size.
    pub m: usize,
    /// Perturbation bound as a fraction of the parameter norm.
    pub eps_frac: f64,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self { eta1: None, eta2: None, m: 10, eps_frac: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SartConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_a: f64,
    pub tau_r: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Validation-gradient refresh period in steps.
    pub k: usize,
    pub surgery_mode: SurgeryMode,
    pub minimax: MinimaxConfig,
    pub grad_scope: GradScope,
    pub norm_scope: NormScope,
    /// Epochs trained as plain SFT before scoring starts.
    pub warmup_epochs: usize,
    /// Force every sample weight to one.
    pub unit_weights: bool,
}

impl Default for SartConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau_a: 0.3,
            tau_r: 0.5,
            lambda: 3.0,
            gamma: 1.0,
            rho: 0.5,
            k: 5,
            surgery_mode: SurgeryMode::Projection,
            minimax: MinimaxConfig::default(),
            grad_scope: GradScope::Full,
            norm_scope: NormScope::Tail,
            warmup_epochs: 1,
            unit_weights: false,
        }
    }
}

impl SartConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(invalid(m));
        if !(-1.0..=1.0).contains(&self.tau_a) {
            return bad(format!("tau_a {} outside [-1, 1]", self.tau_a));
        }
        if !(0.0..=1.0).contains(&self.tau_r) {
            return bad(format!("tau_r {} outside [0, 1]", self.tau_r));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("rho", self.rho)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.surgery_mode == SurgeryMode::Minimax && (self.minimax.m == 0 || !(self.minimax.eps_frac >= 0.0)) {
            return bad("minimax needs m >= 1 and eps_frac >= 0".into());
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Layout(format!("gradient lengths {a} and {b} differ")));
    }
    Ok(())
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    crate::numeric::dot(a, b)
}

/// `g_s - gamma * (g_s . g_v / |g_v|^2) g_v`; `g_s` unchanged when
/// `|g_v| < 1e-12`.
pub fn project_nontransfer<T: Real>(g_s: &[T], g_v: &[T], gamma: f64) -> Result<Vec<T>> {
    same_len(g_s.len(), g_v.len())?;
    let vv = dot64(g_v, g_v);
    if vv.sqrt() < 1e-12 {
        return Ok(g_s.to_vec());
    }
    let c = gamma * dot64(g_s, g_v) / vv;
    Ok(g_s.iter().zip(g_v).map(|(s, v)| T::from_f64(s.to_f64() - c * v.to_f64())).collect())
}

/// `(1 - rho) g_ans + g_reason`
pub fn suppress_answer<T: Real>(g_ans: &[T], g_reason: &[T], rho: f64) -> Result<Vec<T>> {
    same_len(g_ans.len(), g_reason.len())?;
    Ok(g_ans.iter().zip(g_reason).map(|(a, r)| T::from_f64((1.0 - rho) * a.to_f64() + r.to_f64())).collect())
}

/// Ring of at most `m` orthonormal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBuffer {
    basis: Vec<Vec<f64>>,
    capacity: usize,
    dim: usize,
    oldest: usize,
}

/// Residual norm below which an inserted direction counts as already spanned.
pub const SPAN_TOL: f64 = 1e-8;

impl SubspaceBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self { basis: Vec::new(), capacity, dim, oldest: 0 }
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gram-Schmidt against the current basis; the normalized residual is
    /// inserted if its norm exceeds [`SPAN_TOL`], evicting the oldest
    /// direction when full. Returns whether the buffer changed.
    pub fn insert(&mut self, direction: &[f64]) -> Result<bool> {
        same_len(direction.len(), self.dim)?;
        if direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("subspace_insert"));
        }
        if self.capacity == 0 {
            return Ok(false);
        }
        let mut r = direction.to_vec();
        let orth = |r: &mut Vec<f64>, basis: &[Vec<f64>], skip: Option<usize>| {
            for (i, b) in basis.iter().enumerate() {
                if Some(i) == skip {
                    continue;
                }
                let c: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
                r.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        };
        let scale = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        // classical Gram-Schmidt, applied twice
        orth(&mut r, &self.basis, None);
        orth(&mut r, &self.basis, None);
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= SPAN_TOL * scale {
            return Ok(false);
        }
        if self.basis.len() == self.capacity {
            let i = self.oldest;
            r = direction.to_vec();
            orth(&mut r, &self.basis, Some(i));
            orth(&mut r, &self.basis, Some(i));
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= norm);
            self.basis[i] = r;
            self.oldest = (self.oldest + 1) % self.capacity;
        } else {
            r.iter_mut().for_each(|x| *x /= norm);
            self.basis.push(r);
        }
        Ok(true)
    }

    /// `sum_i (g . b_i) b_i`; zero for an empty buffer.
    pub fn project_onto(&self, g: &[f64]) -> Result<Vec<f64>> {
        same_len(g.len(), self.dim)?;
        let mut out = vec![0.0; self.dim];
        for b in &self.basis {
            let c: f64 = g.iter().zip(b).map(|(x, y)| x * y).sum();
            out.iter_mut().zip(b).for_each(|(o, y)| *o += c * y);
        }
        Ok(out)
    }
}

/// Adversarial perturbation and the subspace it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimaxState {
    pub xi: Vec<f64>,
    pub subspace: SubspaceBuffer,
}

impl MinimaxState {
    pub fn new(dim: usize, m: usize) -> Self {
        Self { xi: vec![0.0; dim], subspace: SubspaceBuffer::new(dim, m) }
    }

    /// Ascent on the perturbation inside the subspace and the update
    /// direction orthogonal to it, given the weighted gradient `g` taken at
    /// `theta + xi`:
    ///
    /// `xi <- clip_eps(xi + eta1 P g)`, returns `(I - P) g`.
    pub fn step(&mut self, g: &[f64], eta1: f64, eps: f64) -> Result<Vec<f64>> {
        let p = self.subspace.project_onto(g)?;
        self.xi.iter_mut().zip(&p).for_each(|(x, v)| *x += eta1 * v);
        let n = self.xi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > eps {
            let c = if n > 0.0 { eps / n } else { 0.0 };
            self.xi.iter_mut().for_each(|x| *x *= c);
        }
        Ok(g.iter().zip(&p).map(|(a, b)| a - b).collect())
    }

    /// Non-finite loss at `theta + xi`: drop the perturbation.
    pub fn reset_xi(&mut self) {
        self.xi.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Re-express `xi` in the current basis, so it stays in the span after
    /// ring evictions.
    pub fn reproject_xi(&mut self) -> Result<()> {
        self.xi = self.subspace.project_onto(&self.xi)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryEvent {
    pub step: usize,
    pub sample_index: usize,
    pub applied_projection: bool,
    pub applied_suppression: bool,
    pub pre_alignment: f64,
    pub post_alignment: f64,
}

pub fn write_events_csv(path: &Path, events: &[SurgeryEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
    if events.is_empty() {
        w.write_record(["step", "sample_index", "applied_projection", "applied_suppression", "pre_alignment", "post_alignment"])
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    for e in events {
        w.serialize(e).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
