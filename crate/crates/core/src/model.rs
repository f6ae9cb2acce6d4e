//! GPT-style decoder: token and learned position embeddings, pre-norm blocks
//! with causal multi-head attention and a GELU feed-forward, a final norm and
//! an unbiased output head. Row `i` of a sequence predicts token `i + 1`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Vocab};
use crate::error::{invalid, Error, Result};
use crate::numeric::{Real, Rng, Tape, Tensor, TokenLossKind, Var, VjpOptions};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// 4 layers, width 256, 8 heads, feed-forward 1024.
    pub fn full() -> Self {
        Self { n_layers: 4, d_model: 256, n_heads: 8, d_ff: 1024, vocab_size: Vocab::SIZE, max_seq_len: Vocab::MAX_LEN }
    }

    /// 2 layers, width 64, 4 heads, feed-forward 256.
    pub fn desk() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, d_ff: 256, vocab_size: Vocab::SIZE, max_seq_len: Vocab::MAX_LEN }
    }

    /// 2 layers, width 32, 4 heads, feed-forward 128.
    pub fn small() -> Self {
        Self { n_layers: 2, d_model: 32, n_heads: 4, d_ff: 128, vocab_size: Vocab::SIZE, max_seq_len: Vocab::MAX_LEN }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            other => Err(invalid(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq_len];
        if dims.contains(&0) {
            return Err(invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v, t) = (self.d_model, self.d_ff, self.vocab_size, self.max_seq_len);
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
        v * d + t * d + self.n_layers * block + 2 * d + d * v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered name → (offset, shape) map of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

const PER_BLOCK: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FC1_W: usize = 8;
const FC1_B: usize = 9;
const FC2_W: usize = 10;
const FC2_B: usize = 11;

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v, t) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len);
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            entries.push(LayoutEntry { name, offset, shape });
            offset += n;
        };
        add("tok_emb".into(), vec![v, d]);
        add("pos_emb".into(), vec![t, d]);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            add(p("ln1.gain"), vec![d]);
            add(p("ln1.bias"), vec![d]);
            add(p("attn.qkv.weight"), vec![d, 3 * d]);
            add(p("attn.qkv.bias"), vec![3 * d]);
            add(p("attn.proj.weight"), vec![d, d]);
            add(p("attn.proj.bias"), vec![d]);
            add(p("ln2.gain"), vec![d]);
            add(p("ln2.bias"), vec![d]);
            add(p("ffn.fc1.weight"), vec![d, f]);
            add(p("ffn.fc1.bias"), vec![f]);
            add(p("ffn.fc2.weight"), vec![f, d]);
            add(p("ffn.fc2.bias"), vec![d]);
        }
        add("ln_f.gain".into(), vec![d]);
        add("ln_f.bias".into(), vec![d]);
        add("head.weight".into(), vec![d, v]);
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn n_layers(&self) -> usize {
        (self.entries.len() - 5) / PER_BLOCK
    }

    fn block(&self, l: usize, k: usize) -> usize {
        2 + l * PER_BLOCK + k
    }

    /// Entries whose gradient is row-local in the output rows: the final
    /// block's feed-forward sublayer, the final norm and the head.
    pub fn tail_indices(&self) -> Vec<usize> {
        let last = self.n_layers() - 1;
        let n = self.entries.len();
        let mut v: Vec<usize> = (LN2_G..=FC2_B).map(|k| self.block(last, k)).collect();
        v.extend([n - 3, n - 2, n - 1]);
        v
    }

    /// Indices of the flat vector covered by [`Layout::tail_indices`].
    pub fn tail_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for i in self.tail_indices() {
            mask[self.entries[i].range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

/// Model weights as one flat `f32` vector in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f32>,
}

impl Params {
    pub fn from_flat(config: ModelConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total() {
            return Err(Error::Layout(format!("{} values for a layout of {}", data.len(), layout.total())));
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|e| &self.data[e.range()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(64 + 4 * self.data.len());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if buf.len() < 44 || &buf[..8] != CKPT_MAGIC {
            return Err(bad("missing magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(8) as u32 != CKPT_VERSION {
            return Err(bad("unsupported version"));
        }
        let f: Vec<usize> = (0..6).map(|i| u32_at(12 + 4 * i)).collect();
        let config =
            ModelConfig { n_layers: f[0], d_model: f[1], n_heads: f[2], d_ff: f[3], vocab_size: f[4], max_seq_len: f[5] };
        let count = u64::from_le_bytes(buf[36..44].try_into().unwrap()) as usize;
        let body = &buf[44..];
        if body.len() != 4 * count {
            return Err(bad("truncated parameter block"));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Params::from_flat(config, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SARTCKPT";
const CKPT_VERSION: u32 = 1;

/// Normal(0, 0.02) weights, residual projections scaled by `1/sqrt(2 L)`,
/// zero biases, norms at identity.
pub fn init_params(config: ModelConfig, rng: &mut Rng) -> Result<Params> {
    config.validate()?;
    let layout = Layout::new(&config);
    let mut data = vec![0.0f32; layout.total()];
    let resid = 0.02 / (2.0 * config.n_layers as f64).sqrt();
    for e in layout.entries() {
        let std = if e.name.ends_with("gain") {
            data[e.range()].iter_mut().for_each(|v| *v = 1.0);
            continue;
        } else if e.name.ends_with("bias") {
            continue;
        } else if e.name.ends_with("attn.proj.weight") || e.name.ends_with("ffn.fc2.weight") {
            resid
        } else {
            0.02
        };
        for v in &mut data[e.range()] {
            *v = (rng.normal() * std) as f32;
        }
    }
    Ok(Params { config, layout, data })
}

/// Loss region a row's target token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    None,
    Reasoning,
    Answer,
}

/// Token span a loss or gradient is restricted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    Answer,
    Reasoning,
}

impl Scope {
    fn admits(self, r: Region) -> bool {
        match self {
            Scope::Full => r != Region::None,
            Scope::Answer => r == Region::Answer,
            Scope::Reasoning => r == Region::Reasoning,
        }
    }
}

/// Parameter set over which per-token gradient norms are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Final feed-forward sublayer, final norm and head.
    #[default]
    Tail,
    /// Every parameter; one backward pass per token position.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Mean of `per_token_loss`.
    pub total_loss: f64,
    /// One entry per output token, reasoning tokens first.
    pub per_token_loss: Vec<f64>,
    pub per_token_grad_norm: Option<Vec<f64>>,
    /// Token index of each output entry.
    pub positions: Vec<usize>,
    /// Whether each output entry is an answer token.
    pub is_answer: Vec<bool>,
}

pub(crate) fn check_sample(cfg: &ModelConfig, s: &Sample) -> Result<()> {
    let n = s.token_ids.len();
    if n > cfg.max_seq_len {
        return Err(Error::Span(format!("sequence of {n} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(&t) = s.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Span(format!("token id {t} >= vocab size {}", cfg.vocab_size)));
    }
    let (r, a) = (s.reasoning_span, s.answer_span);
    for (name, sp) in [("reasoning", r), ("answer", a)] {
        if sp.0 > sp.1 || sp.1 > n || (!sp.is_empty() && sp.0 == 0) {
            return Err(Error::Span(format!("{name} span {sp:?} out of range for length {n}")));
        }
    }
    if !r.is_empty() && !a.is_empty() && r.0 < a.1 && a.0 < r.1 {
        return Err(Error::Span(format!("reasoning {r:?} overlaps answer {a:?}")));
    }
    if r.is_empty() && a.is_empty() {
        return Err(Error::Span("empty output region".into()));
    }
    Ok(())
}

/// One recorded forward pass over a batch of sequences.
pub struct Forward<T: Real> {
    tape: Tape<T>,
    params: Vec<Var>,
    logits: Var,
    losses: Option<Var>,
    offsets: Vec<usize>,
    regions: Vec<Region>,
    entries: Vec<LayoutEntry>,
    total: usize,
    tail: Vec<Var>,
}

struct Net<'a, T> {
    cfg: &'a ModelConfig,
    layout: &'a Layout,
    data: &'a [T],
}

impl<T: Real> Net<'_, T> {
    fn run(&self, seqs: &[&[usize]], targets: Option<&[Option<usize>]>, grad: bool, kind: TokenLossKind) -> Result<(Tape<T>, Vec<Var>, Var, Option<Var>)> {
        let cfg = self.cfg;
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        if lens.contains(&0) {
            return Err(Error::Span("empty sequence".into()));
        }
        let mut tape = Tape::with_segments(&lens);
        let mut p = Vec::with_capacity(self.layout.entries().len());
        for e in self.layout.entries() {
            let t = Tensor::new(e.shape.clone(), self.data[e.range()].to_vec())?;
            p.push(if grad { tape.param(t)? } else { tape.leaf(t)? });
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = lens.iter().flat_map(|&n| 0..n).collect();
        if let Some(&t) = pos.iter().max() {
            if t >= cfg.max_seq_len {
                return Err(Error::Span(format!("position {t} >= max_seq_len {}", cfg.max_seq_len)));
            }
        }
        let te = tape.embedding(p[0], &ids)?;
        let pe = tape.embedding(p[1], &pos)?;
        let mut x = tape.add(te, pe)?;
        for l in 0..cfg.n_layers {
            let w = |k: usize| p[self.layout.block(l, k)];
            let h = tape.layer_norm(x, w(LN1_G), w(LN1_B))?;
            let qkv = tape.matmul(h, w(QKV_W))?;
            let qkv = tape.add_bias(qkv, w(QKV_B))?;
            let a = tape.causal_attention(qkv, cfg.n_heads)?;
            let a = tape.matmul(a, w(PROJ_W))?;
            let a = tape.add_bias(a, w(PROJ_B))?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, w(LN2_G), w(LN2_B))?;
            let f = tape.matmul(h, w(FC1_W))?;
            let f = tape.add_bias(f, w(FC1_B))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w(FC2_W))?;
            let f = tape.add_bias(f, w(FC2_B))?;
            x = tape.add(x, f)?;
        }
        let n = p.len();
        let h = tape.layer_norm(x, p[n - 3], p[n - 2])?;
        let logits = tape.matmul(h, p[n - 1])?;
        let losses = match targets {
            Some(t) => Some(tape.token_loss(logits, t, kind)?),
            None => None,
        };
        Ok((tape, p, logits, losses))
    }
}

impl<T: Real> Forward<T> {
    /// Teacher-forced forward pass with per-token losses on the output region.
    pub fn new(params: &Params, samples: &[&Sample], grad: bool, kind: TokenLossKind) -> Result<Self>
    where
        T: From32,
    {
        let data: Vec<T> = params.flat().iter().map(|&v| T::from32(v)).collect();
        Self::with_data(params.config(), params.layout(), &data, samples, grad, kind)
    }

    /// As [`Forward::new`] with weights given as a flat vector in `T`.
    pub fn with_data(cfg: &ModelConfig, layout: &Layout, data: &[T], samples: &[&Sample], grad: bool, kind: TokenLossKind) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("forward batch"));
        }
        if data.len() != layout.total() {
            return Err(Error::Layout(format!("{} values for a layout of {}", data.len(), layout.total())));
        }
        let mut targets = Vec::new();
        let mut regions = Vec::new();
        let mut offsets = Vec::with_capacity(samples.len() + 1);
        offsets.push(0);
        for s in samples {
            check_sample(cfg, s)?;
            let n = s.token_ids.len();
            for i in 0..n {
                let region = if i + 1 >= n {
                    Region::None
                } else if s.answer_span.contains(i + 1) {
                    Region::Answer
                } else if s.reasoning_span.contains(i + 1) {
                    Region::Reasoning
                } else {
                    Region::None
                };
                regions.push(region);
                targets.push((region != Region::None).then(|| s.token_ids[i + 1]));
            }
            offsets.push(offsets.last().unwrap() + n);
        }
        let seqs: Vec<&[usize]> = samples.iter().map(|s| s.token_ids.as_slice()).collect();
        let net = Net { cfg, layout, data };
        let (tape, params, logits, losses) = net.run(&seqs, Some(&targets), grad, kind)?;
        let tail = layout.tail_indices().into_iter().map(|i| params[i]).collect();
        Ok(Self { tape, params, logits, losses, offsets, regions, entries: layout.entries().to_vec(), total: layout.total(), tail })
    }

    pub fn n_samples(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Per-row token losses (zero outside the output region).
    pub fn token_losses(&self) -> Vec<f64> {
        match self.losses {
            Some(l) => self.tape.value(l).data().iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; self.regions.len()],
        }
    }

    /// Mean output-region loss of each sample under `scope`.
    pub fn sample_losses(&self, scope: Scope) -> Result<Vec<f64>> {
        let tl = self.token_losses();
        (0..self.n_samples())
            .map(|s| {
                let rows: Vec<usize> = self.rows(s).filter(|&r| scope.admits(self.regions[r])).collect();
                if rows.is_empty() {
                    return Err(Error::Span(format!("sample {s} has no {scope:?} tokens")));
                }
                Ok(rows.iter().map(|&r| tl[r]).sum::<f64>() / rows.len() as f64)
            })
            .collect()
    }

    /// Number of rows of each sample admitted by `scope`.
    pub fn counts(&self, scope: Scope) -> Vec<usize> {
        (0..self.n_samples()).map(|s| self.rows(s).filter(|&r| scope.admits(self.regions[r])).count()).collect()
    }

    /// Adjoint that makes the backward pass return
    /// `sum_s weights[s] * grad(mean loss of s over scope)`.
    pub fn seed(&self, scope: Scope, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.n_samples() {
            return Err(invalid(format!("{} weights for {} samples", weights.len(), self.n_samples())));
        }
        let counts = self.counts(scope);
        let mut seed = vec![0.0; self.regions.len()];
        for s in 0..self.n_samples() {
            if counts[s] == 0 {
                return Err(Error::Span(format!("sample {s} has no {scope:?} tokens")));
            }
            let c = weights[s] / counts[s] as f64;
            for r in self.rows(s) {
                if scope.admits(self.regions[r]) {
                    seed[r] = c;
                }
            }
        }
        Ok(seed)
    }

    fn loss_var(&self) -> Result<Var> {
        self.losses.ok_or_else(|| invalid("forward pass has no loss"))
    }

    /// Summed gradient for `seed`, flattened in layout order.
    pub fn gradient(&self, seed: &[f64]) -> Result<Vec<T>> {
        let g = self.tape.vjp(self.loss_var()?, seed, &VjpOptions::default())?;
        let mut flat = vec![T::ZERO; self.total];
        for (e, &v) in self.entries.iter().zip(&self.params) {
            let src = g.get(v).ok_or_else(|| invalid("forward pass was built without gradients"))?;
            flat[e.range()].copy_from_slice(src);
        }
        Ok(flat)
    }

    /// One flattened gradient per sample for `seed`, plus the squared
    /// tail-parameter gradient norm contributed by every row.
    pub fn per_sample_gradients(&self, seed: &[f64]) -> Result<(Vec<Vec<T>>, Vec<f64>)> {
        let opts = VjpOptions { per_segment: true, row_norm_params: self.tail.clone(), stop_before: None };
        let g = self.tape.vjp(self.loss_var()?, seed, &opts)?;
        let mut out = vec![vec![T::ZERO; self.total]; self.n_samples()];
        for (e, &v) in self.entries.iter().zip(&self.params) {
            for (s, flat) in out.iter_mut().enumerate() {
                let src = g.segment(v, s).ok_or_else(|| invalid("forward pass was built without gradients"))?;
                flat[e.range()].copy_from_slice(src);
            }
        }
        Ok((out, g.row_sq_norms().to_vec()))
    }

    /// Per-row gradient norm of each token loss over the tail parameters.
    pub fn tail_token_norms(&self) -> Result<Vec<f64>> {
        let seed: Vec<f64> = self.regions.iter().map(|&r| if r == Region::None { 0.0 } else { 1.0 }).collect();
        let opts = VjpOptions { per_segment: false, row_norm_params: self.tail.clone(), stop_before: None };
        let g = self.tape.vjp(self.loss_var()?, &seed, &opts)?;
        Ok(g.row_sq_norms().iter().map(|v| v.sqrt()).collect())
    }

    /// Per-row gradient norm of each token loss over all parameters, exact:
    /// one per-sample backward pass per token position.
    pub fn full_token_norms(&self) -> Result<Vec<f64>> {
        let max_len = (0..self.n_samples()).map(|s| self.rows(s).len()).max().unwrap_or(0);
        let mut norms = vec![0.0; self.regions.len()];
        let opts = VjpOptions { per_segment: true, ..Default::default() };
        for i in 0..max_len {
            let mut seed = vec![0.0; self.regions.len()];
            let mut any = false;
            for s in 0..self.n_samples() {
                let r = self.offsets[s] + i;
                if r < self.offsets[s + 1] && self.regions[r] != Region::None {
                    seed[r] = 1.0;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let g = self.tape.vjp(self.loss_var()?, &seed, &opts)?;
            for s in 0..self.n_samples() {
                let r = self.offsets[s] + i;
                if r < self.offsets[s + 1] && self.regions[r] != Region::None {
                    let sq: f64 = self.params.iter().map(|&v| g.segment(v, s).unwrap().iter().map(|x| x.to_f64().powi(2)).sum::<f64>()).sum();
                    norms[r] = sq.sqrt();
                }
            }
        }
        Ok(norms)
    }

    /// Row logits as `f64`.
    pub fn logits_row(&self, r: usize) -> Vec<f64> {
        self.tape.value(self.logits).row(r).iter().map(|v| v.to_f64()).collect()
    }

    /// Loss breakdown of sample `s`.
    pub fn breakdown(&self, s: usize, norms: Option<&[f64]>) -> LossBreakdown {
        let tl = self.token_losses();
        let mut reasoning = Vec::new();
        let mut answer = Vec::new();
        for r in self.rows(s) {
            match self.regions[r] {
                Region::Reasoning => reasoning.push(r),
                Region::Answer => answer.push(r),
                Region::None => {}
            }
        }
        let rows: Vec<usize> = reasoning.iter().chain(&answer).copied().collect();
        let per_token_loss: Vec<f64> = rows.iter().map(|&r| tl[r]).collect();
        let total_loss = per_token_loss.iter().sum::<f64>() / per_token_loss.len().max(1) as f64;
        LossBreakdown {
            total_loss,
            per_token_grad_norm: norms.map(|n| rows.iter().map(|&r| n[r]).collect()),
            positions: rows.iter().map(|&r| r - self.offsets[s] + 1).collect(),
            is_answer: rows.iter().map(|&r| self.regions[r] == Region::Answer).collect(),
            per_token_loss,
        }
    }
}

/// Lossless conversion from the stored `f32` weights.
pub trait From32 {
    fn from32(v: f32) -> Self;
}

impl From32 for f32 {
    fn from32(v: f32) -> Self {
        v
    }
}

impl From32 for f64 {
    fn from32(v: f32) -> Self {
        v as f64
    }
}

/// Output-region loss of one sample with per-token gradient norms.
pub fn forward_loss(params: &Params, sample: &Sample) -> Result<LossBreakdown> {
    forward_loss_with(params, sample, NormScope::Tail)
}

pub fn forward_loss_with(params: &Params, sample: &Sample, scope: NormScope) -> Result<LossBreakdown> {
    let fwd = Forward::<f32>::new(params, &[sample], true, TokenLossKind::CrossEntropy)?;
    let norms = match scope {
        NormScope::Tail => fwd.tail_token_norms()?,
        NormScope::Full => fwd.full_token_norms()?,
    };
    Ok(fwd.breakdown(0, Some(&norms)))
}

/// Flattened gradient of the mean loss of `sample` over `scope`.
pub fn per_sample_gradient(params: &Params, sample: &Sample, scope: Scope) -> Result<Vec<f32>> {
    let fwd = Forward::<f32>::new(params, &[sample], true, TokenLossKind::CrossEntropy)?;
    let seed = fwd.seed(scope, &[1.0])?;
    fwd.gradient(&seed)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 128;

/// Teacher-forced argmax prediction for every output token of every sample,
/// reasoning tokens first, answer token last.
pub fn predict_output_tokens(params: &Params, samples: &[Sample], exec: Exec) -> Result<Vec<Vec<usize>>> {
    let chunks: Vec<&[Sample]> = samples.chunks(EVAL_CHUNK).collect();
    let parts = par::try_map(exec, &chunks, |_, chunk| -> Result<Vec<Vec<usize>>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let fwd = Forward::<f32>::new(params, &refs, false, TokenLossKind::CrossEntropy)?;
        Ok((0..refs.len())
            .map(|s| {
                let s0 = fwd.offsets[s];
                let r = refs[s];
                r.reasoning_span
                    .range()
                    .chain(r.answer_span.range())
                    .map(|t| argmax(&fwd.logits_row(s0 + t - 1)))
                    .collect()
            })
            .collect())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Teacher-forced argmax at the first answer position.
pub fn predict_answer(params: &Params, sample: &Sample) -> Result<usize> {
    Ok(predict_answers(params, std::slice::from_ref(sample), Exec::Sequential)?[0])
}

pub fn predict_answers(params: &Params, samples: &[Sample], exec: Exec) -> Result<Vec<usize>> {
    for s in samples {
        if s.answer_span.is_empty() {
            return Err(Error::Span("answer span is empty".into()));
        }
    }
    let chunks: Vec<&[Sample]> = samples.chunks(EVAL_CHUNK).collect();
    let parts = par::try_map(exec, &chunks, |_, chunk| -> Result<Vec<usize>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let fwd = Forward::<f32>::new(params, &refs, false, TokenLossKind::CrossEntropy)?;
        Ok((0..refs.len()).map(|s| argmax(&fwd.logits_row(fwd.offsets[s] + refs[s].answer_position() - 1))).collect())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Next-token logits at the last row of every sequence.
fn last_logits(params: &Params, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let data = params.flat();
    let net = Net { cfg: params.config(), layout: params.layout(), data };
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (tape, _, logits, _) = net.run(&refs, None, false, TokenLossKind::CrossEntropy)?;
    let value = tape.value(logits);
    let mut row = 0;
    Ok(seqs
        .iter()
        .map(|s| {
            row += s.len();
            value.row(row - 1).iter().map(|&v| v as f64).collect()
        })
        .collect())
}

fn sample_token(z: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature < 1e-3 {
        return argmax(z);
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u < 0.0 {
            return i;
        }
    }
    w.len() - 1
}

/// Draws `n` free-running completions of the output region from the input
/// prefix and returns the answer token of each. Reasoning steps are sampled
/// until the template's number of `;`-terminated steps is reached; the fixed
/// `answer =` scaffold is then appended and the answer token sampled. `None`
/// marks a completion that ran past `max_seq_len`.
pub fn sample_completions(params: &Params, sample: &Sample, n: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<Option<usize>>> {
    Ok(sample_completions_batch(params, std::slice::from_ref(sample), n, temperature, rng)?.pop().unwrap_or_default())
}

pub fn sample_completions_batch(params: &Params, samples: &[Sample], n: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<Vec<Option<usize>>>> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let max_len = params.config().max_seq_len;
    let mut seqs = Vec::with_capacity(samples.len() * n);
    let mut steps = Vec::with_capacity(samples.len() * n);
    for s in samples {
        let prefix = &s.token_ids[..s.input_span.1];
        let k = s.token_ids[s.reasoning_span.range()].iter().filter(|&&t| t == Vocab::SEMI).count();
        for _ in 0..n {
            seqs.push(prefix.to_vec());
            steps.push(k);
        }
    }
    let mut rngs: Vec<Rng> = (0..seqs.len() as u64).map(|i| rng.fork(i)).collect();
    let mut in_answer = vec![false; seqs.len()];
    for i in 0..seqs.len() {
        if steps[i] == 0 {
            seqs[i].extend([Vocab::ANSWER, Vocab::EQ]);
            in_answer[i] = true;
        }
    }
    let mut done = vec![false; seqs.len()];
    let mut answers: Vec<Option<usize>> = vec![None; seqs.len()];
    loop {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        for chunk in active.chunks(EVAL_CHUNK * 2) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let logits = last_logits(params, &batch)?;
            for (&i, z) in chunk.iter().zip(&logits) {
                let t = sample_token(z, temperature, &mut rngs[i]);
                seqs[i].push(t);
                if in_answer[i] {
                    answers[i] = Some(t);
                    done[i] = true;
                    continue;
                }
                if t == Vocab::SEMI {
                    steps[i] -= 1;
                    if steps[i] == 0 {
                        seqs[i].extend([Vocab::ANSWER, Vocab::EQ]);
                        in_answer[i] = true;
                    }
                }
                if seqs[i].len() >= max_len {
                    done[i] = true;
                }
            }
        }
    }
    Ok(answers.chunks(n).map(|c| c.to_vec()).collect())
}

/// Most frequent answer; ties go to the lowest token id, invalid draws are
/// ignored.
pub fn majority_vote(answers: &[Option<usize>]) -> Option<usize> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for a in answers.iter().flatten() {
        match counts.iter_mut().find(|(t, _)| t == a) {
            Some(c) => c.1 += 1,
            None => counts.push((*a, 1)),
        }
    }
    counts.sort();
    counts.iter().fold(None, |best: Option<(usize, usize)>, &(t, c)| match best {
        Some((_, bc)) if bc >= c => best,
        _ => Some((t, c)),
    }).map(|(t, _)| t)
}
