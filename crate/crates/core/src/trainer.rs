//! Training loop: AdamW with cosine annealing, the shortcut-aware step
//! (score, reweight, surgery, update) and the baseline methods.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Sample};
use crate::diagnostics::{batch_signals, score_dataset, shortcut_score, ShortcutDiagnostics, ValidationGradientCache};
use crate::error::{invalid, Error, Result};
use crate::model::{self, init_params, Forward, ModelConfig, Params, Scope};
use crate::numeric::{Rng, Stream, TokenLossKind};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::par::Exec;
use crate::surgery::{project_nontransfer, GradScope, MinimaxState, SartConfig, SurgeryEvent, SurgeryMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Sart,
    SelfConsistencyEval,
    DataFiltering,
    Jtt,
    Focal,
    GroupDro,
    Lff,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sft,
        Method::Sart,
        Method::SelfConsistencyEval,
        Method::DataFiltering,
        Method::Jtt,
        Method::Focal,
        Method::GroupDro,
        Method::Lff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Sart => "sart",
            Method::SelfConsistencyEval => "self_consistency_eval",
            Method::DataFiltering => "data_filtering",
            Method::Jtt => "jtt",
            Method::Focal => "focal",
            Method::GroupDro => "group_dro",
            Method::Lff => "lff",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .or(match s {
                "self_consistency" => Some(Method::SelfConsistencyEval),
                "filtering" => Some(Method::DataFiltering),
                _ => None,
            })
            .ok_or_else(|| invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    /// SFT epochs before filtering or error-set selection.
    pub baseline_warmup_epochs: usize,
    pub filter_threshold: f64,
    pub jtt_upweight: f64,
    pub focal_gamma: f64,
    pub dro_step: f64,
    pub lff_q: f64,
    pub lff_ema: f64,
    pub sc_samples: usize,
    pub sc_temperature: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            baseline_warmup_epochs: 5,
            filter_threshold: 0.9,
            jtt_upweight: 5.0,
            focal_gamma: 2.0,
            dro_step: 0.01,
            lff_q: 0.7,
            lff_ema: 0.7,
            sc_samples: 5,
            sc_temperature: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub method: Method,
    pub model: ModelConfig,
    pub sart: SartConfig,
    pub method_params: MethodParams,
    /// Samples per forward/backward pass inside a batch.
    pub micro_batch: usize,
    pub exec: Exec,
    /// Validation accuracy after every epoch.
    pub eval_each_epoch: bool,
    /// Score the train set after warmup and at the end (sart only).
    pub record_diagnostics: bool,
    /// Where to write a JSON state dump when training diverges.
    #[serde(skip)]
    pub divergence_dump: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            method: Method::Sft,
            model: ModelConfig::full(),
            sart: SartConfig::default(),
            method_params: MethodParams::default(),
            micro_batch: 64,
            exec: Exec::default(),
            eval_each_epoch: true,
            record_diagnostics: true,
            divergence_dump: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(invalid("batch_size and micro_batch must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning_rate and weight_decay must be non-negative"));
        }
        self.model.validate()?;
        self.sart.validate()?;
        let mp = &self.method_params;
        if mp.sc_samples == 0 || !(mp.sc_temperature > 0.0) {
            return Err(invalid("self-consistency needs at least one sample and a positive temperature"));
        }
        if !(mp.lff_q > 0.0 && mp.lff_q <= 1.0) || !(0.0..1.0).contains(&mp.lff_ema) {
            return Err(invalid("lff_q must lie in (0, 1] and lff_ema in [0, 1)"));
        }
        Ok(())
    }

    /// Steps per epoch for a train set of `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub flagged_fraction: f64,
    pub projected: usize,
    pub suppressed: usize,
    pub val_accuracy: Option<f64>,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    #[serde(skip)]
    pub events: Vec<SurgeryEvent>,
    /// Train-set diagnostics right after warmup.
    #[serde(skip)]
    pub warmup_diagnostics: Option<Vec<ShortcutDiagnostics>>,
    /// Train-set diagnostics at the final checkpoint.
    #[serde(skip)]
    pub final_diagnostics: Option<Vec<ShortcutDiagnostics>>,
    /// Train indices flagged by the baseline (filtered or error set).
    pub flagged: Option<Vec<usize>>,
    pub minimax_resets: usize,
    pub seconds: f64,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    epoch: usize,
    loss: f64,
    learning_rate: f64,
    param_norm: f64,
    method: Method,
    epochs: &'a [EpochLog],
}

/// Per-step weighting rule of a method.
enum Weighting<'a> {
    Uniform,
    Fixed(&'a [f64]),
    Sart,
    GroupDro(&'a mut [f64; 4]),
    Lff(&'a mut LffState),
}

struct LffState {
    biased: Params,
    opt: AdamW,
    ema_b: Vec<f64>,
    ema_d: Vec<f64>,
}

#[derive(Default)]
struct StepStats {
    loss_sum: f64,
    weight_sum: f64,
    min_weight: f64,
    flagged: usize,
    projected: usize,
    suppressed: usize,
    count: usize,
}

/// Trainer state: parameters, optimizer, schedule position and SART caches.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    data: &'d DatasetSplit,
    pub params: Params,
    opt: AdamW,
    schedule: CosineSchedule,
    step: usize,
    cache: ValidationGradientCache,
    minimax: Option<MinimaxState>,
    shuffle: Rng,
    pub log: TrainLog,
    epoch: usize,
    minimax_weights: Vec<f64>,
}

fn check_finite_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > 1e3 {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let params = init_params(cfg.model, &mut Rng::new(cfg.seed, Stream::Init))?;
        let opt = AdamW::new(params.len(), AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
        let total = cfg.epochs * cfg.steps_per_epoch(data.train.len());
        let minimax = (cfg.method == Method::Sart && cfg.sart.surgery_mode == SurgeryMode::Minimax)
            .then(|| MinimaxState::new(params.len(), cfg.sart.minimax.m));
        Ok(Self {
            schedule: CosineSchedule { base: cfg.learning_rate, total_steps: total },
            cache: ValidationGradientCache::new(cfg.sart.k),
            shuffle: Rng::new(cfg.seed, Stream::Shuffle),
            cfg,
            data,
            params,
            opt,
            step: 0,
            minimax,
            log: TrainLog::default(),
            epoch: 0,
            minimax_weights: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn minimax_state(&self) -> Option<&MinimaxState> {
        self.minimax.as_ref()
    }

    fn lr(&self, progress: f64) -> f64 {
        let total = self.schedule.total_steps.max(1) as f64;
        self.schedule.lr((progress * total).round() as usize)
    }

    /// Runs the configured method end to end.
    pub fn run(mut self) -> Result<(Params, TrainLog)> {
        let t0 = Instant::now();
        let res = match self.cfg.method {
            Method::Sft | Method::SelfConsistencyEval => self.train_plain(TokenLossKind::CrossEntropy),
            Method::Focal => self.train_plain(TokenLossKind::Focal { gamma: self.cfg.method_params.focal_gamma }),
            Method::Sart => self.train_sart(),
            Method::DataFiltering => self.train_filtering(),
            Method::Jtt => self.train_jtt(),
            Method::GroupDro => self.train_group_dro(),
            Method::Lff => self.train_lff(),
        };
        if let Err(Error::Diverged { step, loss }) = &res {
            self.dump_divergence(*step, *loss);
        }
        res?;
        self.log.steps = self.step;
        self.log.seconds = t0.elapsed().as_secs_f64();
        Ok((self.params, self.log))
    }

    fn dump_divergence(&self, step: usize, loss: f64) {
        let Some(path) = &self.cfg.divergence_dump else { return };
        let dump = DivergenceDump {
            step,
            epoch: self.epoch,
            loss,
            learning_rate: self.lr(self.epoch as f64 / self.cfg.epochs.max(1) as f64),
            param_norm: crate::numeric::sq_norm(self.params.flat()).sqrt(),
            method: self.cfg.method,
            epochs: &self.log.epochs,
        };
        if let Ok(s) = serde_json::to_string_pretty(&dump) {
            if let Err(e) = std::fs::write(path, s) {
                log::warn!("could not write divergence dump: {e}");
            }
        }
    }

    fn train_plain(&mut self, kind: TokenLossKind) -> Result<()> {
        let all: Vec<usize> = (0..self.data.train.len()).collect();
        for _ in 0..self.cfg.epochs {
            self.run_epoch(&all, kind, &mut Weighting::Uniform)?;
        }
        Ok(())
    }

    fn train_sart(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.data.train.len()).collect();
        let warm = self.cfg.sart.warmup_epochs.min(self.cfg.epochs);
        for e in 0..self.cfg.epochs {
            if e < warm {
                self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::Uniform)?;
            } else {
                if e == warm && self.cfg.record_diagnostics {
                    self.log.warmup_diagnostics = Some(self.score_train()?);
                }
                self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::Sart)?;
            }
        }
        if self.cfg.record_diagnostics {
            if warm == self.cfg.epochs {
                self.log.warmup_diagnostics = Some(self.score_train()?);
            }
            self.log.final_diagnostics = Some(self.score_train()?);
        }
        Ok(())
    }

    /// Diagnostics of every train sample on the current parameters.
    pub fn score_train(&mut self) -> Result<Vec<ShortcutDiagnostics>> {
        let g_v = crate::diagnostics::validation_gradient(&self.params, &self.data.val, self.cfg.exec)?;
        score_dataset(&self.params, &self.data.train, &g_v, &self.cfg.sart, self.cfg.exec)
    }

    fn train_filtering(&mut self) -> Result<()> {
        let n = self.data.train.len();
        let all: Vec<usize> = (0..n).collect();
        let warm = self.cfg.method_params.baseline_warmup_epochs.min(self.cfg.epochs);
        for _ in 0..warm {
            self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::Uniform)?;
        }
        let probs = target_answer_probs(&self.params, &self.data.train, self.cfg.exec)?;
        let threshold = self.cfg.method_params.filter_threshold;
        let dropped: Vec<usize> = (0..n).filter(|&i| probs[i] > threshold).collect();
        let kept: Vec<usize> = (0..n).filter(|&i| probs[i] <= threshold).collect();
        log::info!("data filtering dropped {} of {n} samples", dropped.len());
        self.log.flagged = Some(dropped);
        for _ in warm..self.cfg.epochs {
            if kept.is_empty() {
                break;
            }
            self.run_epoch(&kept, TokenLossKind::CrossEntropy, &mut Weighting::Uniform)?;
        }
        Ok(())
    }

    fn train_jtt(&mut self) -> Result<()> {
        let n = self.data.train.len();
        let all: Vec<usize> = (0..n).collect();
        let warm = self.cfg.method_params.baseline_warmup_epochs.min(self.cfg.epochs);
        for _ in 0..warm {
            self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::Uniform)?;
        }
        let preds = model::predict_answers(&self.params, &self.data.train, self.cfg.exec)?;
        let errors: Vec<usize> = (0..n).filter(|&i| preds[i] != self.data.train[i].answer_token()).collect();
        log::info!("jtt error set holds {} of {n} samples", errors.len());
        let mut weights = vec![1.0; n];
        for &i in &errors {
            weights[i] = self.cfg.method_params.jtt_upweight;
        }
        self.log.flagged = Some(errors);
        // second stage starts from scratch
        let fresh = Trainer::new(self.cfg.clone(), self.data)?;
        self.params = fresh.params;
        self.opt = fresh.opt;
        self.shuffle = fresh.shuffle;
        self.step = 0;
        self.log.epochs.clear();
        for _ in 0..self.cfg.epochs {
            self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::Fixed(&weights))?;
        }
        Ok(())
    }

    fn train_group_dro(&mut self) -> Result<()> {
        let mut present = [false; 4];
        for s in &self.data.train {
            present[s.group_index()] = true;
        }
        if present.iter().any(|p| !p) {
            return Err(Error::MissingGroups);
        }
        let all: Vec<usize> = (0..self.data.train.len()).collect();
        let mut q = [0.25; 4];
        for _ in 0..self.cfg.epochs {
            self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::GroupDro(&mut q))?;
        }
        Ok(())
    }

    fn train_lff(&mut self) -> Result<()> {
        let n = self.data.train.len();
        let all: Vec<usize> = (0..n).collect();
        let biased = init_params(self.cfg.model, &mut Rng::with_stream_id(self.cfg.seed, 0x1ff))?;
        let opt = AdamW::new(biased.len(), AdamWConfig { weight_decay: self.cfg.weight_decay, ..Default::default() });
        let mut st = LffState { biased, opt, ema_b: vec![f64::NAN; n], ema_d: vec![f64::NAN; n] };
        for _ in 0..self.cfg.epochs {
            self.run_epoch(&all, TokenLossKind::CrossEntropy, &mut Weighting::Lff(&mut st))?;
        }
        Ok(())
    }

    fn run_epoch(&mut self, indices: &[usize], kind: TokenLossKind, weighting: &mut Weighting) -> Result<()> {
        let t0 = Instant::now();
        let mut order = indices.to_vec();
        self.shuffle.shuffle(&mut order);
        let n_batches = order.len().div_ceil(self.cfg.batch_size);
        let mut stats = StepStats { min_weight: f64::INFINITY, ..Default::default() };
        let mut lr = 0.0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let progress = (self.epoch as f64 + b as f64 / n_batches as f64) / self.cfg.epochs.max(1) as f64;
            lr = self.lr(progress);
            self.train_step(batch, kind, weighting, lr, &mut stats)?;
        }
        let val_accuracy = if self.cfg.eval_each_epoch && !self.data.val.is_empty() {
            let preds = model::predict_answers(&self.params, &self.data.val, self.cfg.exec)?;
            let hits = preds.iter().zip(&self.data.val).filter(|(p, s)| **p == s.answer_token()).count();
            Some(100.0 * hits as f64 / self.data.val.len() as f64)
        } else {
            None
        };
        let c = stats.count.max(1) as f64;
        let entry = EpochLog {
            epoch: self.epoch,
            train_loss: stats.loss_sum / c,
            mean_weight: stats.weight_sum / c,
            min_weight: if stats.count > 0 { stats.min_weight } else { 1.0 },
            flagged_fraction: stats.flagged as f64 / c,
            projected: stats.projected,
            suppressed: stats.suppressed,
            val_accuracy,
            learning_rate: lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::debug!("{:?} epoch {}: loss {:.4} val {:?}", self.cfg.method, entry.epoch, entry.train_loss, entry.val_accuracy);
        self.log.epochs.push(entry);
        self.epoch += 1;
        Ok(())
    }

    /// One optimizer step on the samples at `batch` (train indices).
    pub fn train_step_on(&mut self, batch: &[usize], sart: bool) -> Result<()> {
        let mut stats = StepStats { min_weight: f64::INFINITY, ..Default::default() };
        let lr = self.schedule.lr(self.step);
        let mut w = if sart { Weighting::Sart } else { Weighting::Uniform };
        self.train_step(batch, TokenLossKind::CrossEntropy, &mut w, lr, &mut stats)
    }

    /// Aggregated shortcut-aware gradient of the samples at `batch`, before
    /// the optimizer transform. Advances the validation-gradient cache.
    pub fn sart_gradient(&mut self, batch: &[usize]) -> Result<Vec<f32>> {
        let mut stats = StepStats { min_weight: f64::INFINITY, ..Default::default() };
        let lr = self.schedule.lr(self.step);
        self.batch_gradient(batch, TokenLossKind::CrossEntropy, &mut Weighting::Sart, lr, &mut stats)?
            .ok_or_else(|| invalid("minimax mode has no aggregated gradient"))
    }

    fn train_step(&mut self, batch: &[usize], kind: TokenLossKind, weighting: &mut Weighting, lr: f64, stats: &mut StepStats) -> Result<()> {
        match self.batch_gradient(batch, kind, weighting, lr, stats)? {
            Some(grad) => {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { step: self.step, loss: f64::NAN });
                }
                self.opt.step(self.params.flat_mut(), &grad, lr)?;
            }
            None => {
                let samples: Vec<&Sample> = batch.iter().map(|&i| &self.data.train[i]).collect();
                let weights = std::mem::take(&mut self.minimax_weights);
                self.minimax_step(&samples, &weights, lr)?;
            }
        }
        self.step += 1;
        Ok(())
    }

    fn batch_gradient(&mut self, batch: &[usize], kind: TokenLossKind, weighting: &mut Weighting, lr: f64, stats: &mut StepStats) -> Result<Option<Vec<f32>>> {
        let samples: Vec<&Sample> = batch.iter().map(|&i| &self.data.train[i]).collect();
        let bsz = samples.len() as f64;
        let micro = self.cfg.micro_batch;
        let sart = matches!(weighting, Weighting::Sart);
        let minimax = sart && self.cfg.sart.surgery_mode == SurgeryMode::Minimax;
        let g_v: Option<Vec<f32>> = if sart {
            Some(self.cache.get(&self.params, &self.data.val, self.step, self.cfg.exec)?.to_vec())
        } else {
            None
        };
        let mask = (sart && self.cfg.sart.grad_scope == GradScope::HeadRestricted).then(|| self.params.layout().tail_mask());
        let g_v_proj: Option<Vec<f32>> = match (&g_v, &mask) {
            (Some(g), Some(m)) => Some(g.iter().zip(m).map(|(v, &k)| if k { *v } else { 0.0 }).collect()),
            (Some(g), None) => Some(g.clone()),
            _ => None,
        };

        let mut forwards = Vec::new();
        let mut losses = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(micro) {
            let fwd = Forward::<f32>::new(&self.params, chunk, true, kind)?;
            losses.extend(fwd.sample_losses(Scope::Full)?);
            forwards.push(fwd);
        }
        let mean_loss = losses.iter().sum::<f64>() / bsz;
        check_finite_loss(self.step, mean_loss)?;

        let mut weights = match weighting {
            Weighting::Uniform | Weighting::Sart => vec![1.0; samples.len()],
            Weighting::Fixed(w) => batch.iter().map(|&i| w[i]).collect(),
            Weighting::GroupDro(q) => group_dro_weights(q, &samples, &losses, self.cfg.method_params.dro_step),
            Weighting::Lff(st) => self.lff_weights(st, batch, &samples, &losses, lr)?,
        };

        let p = self.params.len();
        let mut acc = vec![0.0f64; p];
        let cfg = self.cfg.sart;
        let mut offset = 0;
        for fwd in &forwards {
            let m = fwd.n_samples();
            let w = &mut weights[offset..offset + m];
            let mut surgery: Vec<(usize, Vec<f64>)> = Vec::new();
            if let Some(g_v) = &g_v {
                let sig = batch_signals(fwd, g_v, mask.as_deref(), cfg.norm_scope)?;
                for s in 0..m {
                    let c = sig.concentration[s];
                    let d = shortcut_score(sig.alignment[s], c.value, &cfg);
                    if !cfg.unit_weights {
                        w[s] *= d.weight;
                    }
                    if d.score > 0.0 {
                        stats.flagged += 1;
                    }
                    if minimax || cfg.surgery_mode == SurgeryMode::Off {
                        continue;
                    }
                    let suppress = c.value > cfg.tau_r && cfg.rho > 0.0;
                    let project = sig.alignment[s] < cfg.tau_a && cfg.gamma > 0.0;
                    if !(suppress || project) {
                        continue;
                    }
                    let g_s = sig.full_gradient(s);
                    let mut g2: Vec<f32> = if suppress {
                        sig.g_ans[s].iter().zip(&sig.g_reason[s]).map(|(a, r)| ((1.0 - cfg.rho) * *a as f64 + *r as f64) as f32).collect()
                    } else {
                        g_s.clone()
                    };
                    if project {
                        g2 = project_nontransfer(&g2, g_v_proj.as_deref().unwrap(), cfg.gamma)?;
                    }
                    stats.projected += project as usize;
                    stats.suppressed += suppress as usize;
                    let post = crate::diagnostics::alignment_masked(&g2, g_v, mask.as_deref())?;
                    self.log.events.push(SurgeryEvent {
                        step: self.step,
                        sample_index: batch[offset + s],
                        applied_projection: project,
                        applied_suppression: suppress,
                        pre_alignment: sig.alignment[s],
                        post_alignment: post,
                    });
                    let delta: Vec<f64> = g2.iter().zip(&g_s).map(|(a, b)| *a as f64 - *b as f64).collect();
                    surgery.push((s, delta));
                }
            }
            if !minimax {
                let seed = fwd.seed(Scope::Full, &w.iter().map(|x| x / bsz).collect::<Vec<_>>())?;
                let g = fwd.gradient(&seed)?;
                acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x as f64);
                for (s, delta) in surgery {
                    let c = w[s] / bsz;
                    acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += c * d);
                }
            }
            offset += m;
        }
        for &w in &weights {
            stats.weight_sum += w;
            stats.min_weight = stats.min_weight.min(w);
        }
        stats.loss_sum += losses.iter().sum::<f64>();
        stats.count += samples.len();
        drop(forwards);

        if minimax {
            self.minimax_weights = weights;
            return Ok(None);
        }
        Ok(Some(acc.iter().map(|&v| v as f32).collect()))
    }

    /// Gradient of `sum_s w_s / B * loss_s` at `params`.
    fn weighted_gradient(&self, params: &Params, samples: &[&Sample], weights: &[f64]) -> Result<Vec<f64>> {
        let bsz = samples.len() as f64;
        let mut acc = vec![0.0f64; params.len()];
        for (ci, chunk) in samples.chunks(self.cfg.micro_batch).enumerate() {
            let fwd = Forward::<f32>::new(params, chunk, true, TokenLossKind::CrossEntropy)?;
            let w: Vec<f64> = weights[ci * self.cfg.micro_batch..][..chunk.len()].iter().map(|x| x / bsz).collect();
            let g = fwd.gradient(&fwd.seed(Scope::Full, &w)?)?;
            acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x as f64);
        }
        Ok(acc)
    }

    fn minimax_step(&mut self, samples: &[&Sample], weights: &[f64], lr: f64) -> Result<()> {
        let mc = self.cfg.sart.minimax;
        let eta1 = mc.eta1.unwrap_or(lr);
        let eta2 = mc.eta2.unwrap_or(lr);
        let theta: Vec<f64> = self.params.flat().iter().map(|&v| v as f64).collect();
        let eps = mc.eps_frac * theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let state = self.minimax.as_mut().expect("minimax state");
        let perturbed: Vec<f32> = theta.iter().zip(&state.xi).map(|(t, x)| (t + x) as f32).collect();
        let pp = Params::from_flat(self.cfg.model, perturbed)?;
        let g = match self.weighted_gradient(&pp, samples, weights) {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => {
                log::warn!("non-finite loss at perturbed parameters, step {}; resetting xi", self.step);
                self.log.minimax_resets += 1;
                self.minimax.as_mut().unwrap().reset_xi();
                self.weighted_gradient(&self.params, samples, weights)?
            }
            Err(e) => return Err(e),
        };
        let state = self.minimax.as_mut().unwrap();
        let dir = state.step(&g, eta1, eps)?;
        let flat = self.params.flat_mut();
        let mut realized = vec![0.0f64; flat.len()];
        for i in 0..flat.len() {
            let old = flat[i];
            flat[i] = (old as f64 - eta2 * dir[i]) as f32;
            realized[i] = flat[i] as f64 - old as f64;
        }
        if realized.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: self.step, loss: f64::NAN });
        }
        state.subspace.insert(&realized)?;
        state.reproject_xi()?;
        Ok(())
    }

    fn lff_weights(&self, st: &mut LffState, batch: &[usize], samples: &[&Sample], _main_losses: &[f64], lr: f64) -> Result<Vec<f64>> {
        let q = self.cfg.method_params.lff_q;
        let ema = self.cfg.method_params.lff_ema;
        let bsz = samples.len() as f64;
        let mut ce_b = Vec::with_capacity(samples.len());
        let mut ce_d = Vec::with_capacity(samples.len());
        let mut acc = vec![0.0f64; st.biased.len()];
        for chunk in samples.chunks(self.cfg.micro_batch) {
            let fb = Forward::<f32>::new(&st.biased, chunk, true, TokenLossKind::GeneralizedCe { q })?;
            // answer-token cross-entropy recovered from the GCE value
            ce_b.extend(fb.sample_losses(Scope::Answer)?.iter().map(|&g| -(1.0 - q * g).max(1e-300).ln() / q));
            let g = fb.gradient(&fb.seed(Scope::Full, &vec![1.0 / bsz; chunk.len()])?)?;
            acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x as f64);
            let fd = Forward::<f32>::new(&self.params, chunk, false, TokenLossKind::CrossEntropy)?;
            ce_d.extend(fd.sample_losses(Scope::Answer)?);
        }
        let grad: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        st.opt.step(st.biased.flat_mut(), &grad, lr)?;
        let mut w = Vec::with_capacity(samples.len());
        for (k, &i) in batch.iter().enumerate() {
            let upd = |old: f64, new: f64| if old.is_nan() { new } else { ema * old + (1.0 - ema) * new };
            st.ema_b[i] = upd(st.ema_b[i], ce_b[k]);
            st.ema_d[i] = upd(st.ema_d[i], ce_d[k]);
            let denom = st.ema_b[i] + st.ema_d[i];
            w.push(if denom > 0.0 { st.ema_b[i] / denom } else { 0.5 });
        }
        Ok(w)
    }
}

/// Exponentiated-gradient group update, then per-sample weights so that the
/// batch objective is `sum_g q_g * mean loss of g`.
fn group_dro_weights(q: &mut [f64; 4], samples: &[&Sample], losses: &[f64], step: f64) -> Vec<f64> {
    let mut sum = [0.0; 4];
    let mut count = [0usize; 4];
    for (s, l) in samples.iter().zip(losses) {
        sum[s.group_index()] += l;
        count[s.group_index()] += 1;
    }
    for g in 0..4 {
        if count[g] > 0 {
            q[g] *= (step * sum[g] / count[g] as f64).exp();
        }
    }
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= z);
    let bsz = samples.len() as f64;
    samples.iter().map(|s| q[s.group_index()] * bsz / count[s.group_index()] as f64).collect()
}

/// Probability of the target answer token under teacher forcing.
pub fn target_answer_probs(params: &Params, samples: &[Sample], exec: Exec) -> Result<Vec<f64>> {
    let chunks: Vec<&[Sample]> = samples.chunks(128).collect();
    let parts = crate::par::try_map(exec, &chunks, |_, chunk| -> Result<Vec<f64>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let fwd = Forward::<f32>::new(params, &refs, false, TokenLossKind::CrossEntropy)?;
        Ok(fwd.sample_losses(Scope::Answer)?.iter().map(|l| (-l).exp()).collect())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Trains `cfg.method` on `data`.
pub fn train(cfg: TrainConfig, data: &DatasetSplit) -> Result<(Params, TrainLog)> {
    Trainer::new(cfg, data)?.run()
}

/// Single-component variants of the shortcut-aware method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    ReweightOnly,
    SurgeryOnly,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::ReweightOnly, Ablation::SurgeryOnly, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::ReweightOnly => "reweight_only",
            Ablation::SurgeryOnly => "surgery_only",
            Ablation::Full => "full",
        }
    }

    /// `base` with the variant applied; the method becomes `sart`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.method = Method::Sart;
        match self {
            Ablation::ReweightOnly => {
                cfg.sart.gamma = 0.0;
                cfg.sart.rho = 0.0;
                cfg.sart.surgery_mode = SurgeryMode::Off;
            }
            Ablation::SurgeryOnly => cfg.sart.unit_weights = true,
            Ablation::Full => {}
        }
        cfg
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| invalid(format!("unknown ablation `{s}`")))
    }
}

/// Trains the variant and evaluates it.
pub fn ablation_run(data: &DatasetSplit, variant: Ablation, base: &TrainConfig) -> Result<crate::metrics::MetricsReport> {
    let cfg = variant.apply(base);
    let (params, log) = train(cfg.clone(), data)?;
    crate::metrics::evaluate(&params, &log, &cfg, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("irm".parse::<Method>().is_err());
    }

    #[test]
    fn defaults_match_reported_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (40, 64));
        assert_eq!((c.learning_rate, c.weight_decay), (1e-3, 1e-4));
        let m = MethodParams::default();
        assert_eq!((m.baseline_warmup_epochs, m.jtt_upweight, m.focal_gamma), (5, 5.0, 2.0));
        assert_eq!((m.sc_samples, m.sc_temperature, m.filter_threshold), (5, 0.8, 0.9));
    }

    #[test]
    fn group_dro_uniform_when_groups_balanced_and_equal() {
        let mut q = [0.25; 4];
        let w = group_dro_weights(&mut q, &[], &[], 0.01);
        assert!(w.is_empty());
        assert_eq!(q, [0.25; 4]);
    }
}
