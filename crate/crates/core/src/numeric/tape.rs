//! Define-by-run reverse-mode differentiation over matrix-shaped tensors.
//!
//! A [`Tape`] records every op of one forward pass. Row-aligned activations
//! (one row per token) can be split into *segments*, one per sample, so that
//! a single batched backward pass can return either the summed parameter
//! gradient or one gradient per sample. Samples never interact in the
//! forward pass (attention is block-diagonal by segment), which makes the
//! per-segment gradients exact rather than approximate.

use std::ops::Range;

use super::real::{sq_norm, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-token loss applied by [`Tape::token_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TokenLossKind {
    /// `-ln p_t`
    CrossEntropy,
    /// `-(1 - p_t)^gamma ln p_t`
    Focal { gamma: f64 },
    /// `(1 - p_t^q) / q`
    GeneralizedCe { q: f64 },
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Gelu(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<f64> },
    TokenLoss { logits: Var, targets: Vec<Option<usize>>, kind: TokenLossKind, probs: Vec<f64> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    param: bool,
}

/// Options for [`Tape::vjp`].
#[derive(Clone, Debug, Default)]
pub struct VjpOptions {
    /// Return one gradient per segment for every parameter leaf instead of
    /// the summed gradient.
    pub per_segment: bool,
    /// Parameters whose per-row gradient contribution is rank one (they are
    /// only reached through row-local ops). For these the squared norm of
    /// each row's contribution is accumulated into
    /// [`Gradients::row_sq_norms`].
    pub row_norm_params: Vec<Var>,
    /// Nodes with an index below this one are not visited.
    pub stop_before: Option<Var>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    leaf: Vec<Option<Vec<T>>>,
    per_segment: Vec<Option<Vec<T>>>,
    n_segments: usize,
    row_sq: Vec<f64>,
}

impl<T: Real> Gradients<T> {
    /// Summed gradient of a leaf, `None` when the leaf received no gradient
    /// (or, in per-segment mode, when it is a parameter).
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaf.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of parameter `v` restricted to segment `s`.
    pub fn segment(&self, v: Var, s: usize) -> Option<&[T]> {
        let all = self.per_segment.get(v.0)?.as_deref()?;
        let n = all.len() / self.n_segments.max(1);
        Some(&all[s * n..(s + 1) * n])
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    /// Squared norms accumulated for [`VjpOptions::row_norm_params`], one per row.
    pub fn row_sq_norms(&self) -> &[f64] {
        &self.row_sq
    }
}

/// Recording of one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    segments: Vec<Range<usize>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn to64<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.to_f64()).collect()
}

fn from64<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::from_f64(v)).collect()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), segments: Vec::new(), consumed: false }
    }

    /// Tape whose row-aligned activations are split into consecutive
    /// segments of the given lengths.
    pub fn with_segments(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &l in lengths {
            segments.push(start..start + l);
            start += l;
        }
        Self { nodes: Vec::new(), segments, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| Error::Shape {
            op: "tape",
            detail: format!("unknown var {}", v.0),
        })
    }

    fn seg_ranges(&self, rows: usize, op: &'static str) -> Result<Vec<Range<usize>>> {
        if self.segments.is_empty() {
            return Ok(vec![0..rows]);
        }
        let total = self.segments.last().map(|r| r.end).unwrap_or(0);
        if total != rows {
            return Err(Error::Shape {
                op,
                detail: format!("segments cover {total} rows, activation has {rows}"),
            });
        }
        Ok(self.segments.clone())
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.consumed = false;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, param: false });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf input; differentiable iff the tensor was built `with_grad`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg, "leaf")
    }

    /// Differentiable model parameter. Only parameters can receive
    /// per-segment gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, true, "param")?;
        self.nodes[v.0].param = true;
        Ok(v)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape { op: "add", detail: format!("{:?} + {:?}", av.shape(), bv.shape()) });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    /// Adds a `[n]` vector to every row of a `[m, n]` matrix (the only
    /// broadcast supported).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(bias)?.value);
        if bv.numel() != xv.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", xv.shape(), bv.shape()),
            });
        }
        let n = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % n]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(t, Op::AddBias(x, bias), rg, "add_bias")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape { op: "mul", detail: format!("{:?} * {:?}", av.shape(), bv.shape()) });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let t = xv.map(|v| T::from_f64(v.to_f64() * c));
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.node(x)?.value.data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg, "sum")
    }

    /// `sum_i w_i x_i` over all elements, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if weights.len() != xv.numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{} weights for {} values", weights.len(), xv.numel()),
            });
        }
        let s: f64 = xv.data().iter().zip(weights).map(|(v, w)| v.to_f64() * w).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::WeightedSum(x, weights.to_vec()), rg, "weighted_sum")
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Shape { op: "embedding", detail: format!("id {id} >= vocab {vocab}") });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(&[table]);
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg, "embedding")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, n) = (xv.rows(), xv.cols());
        let (g, b) = (&self.node(gain)?.value, &self.node(bias)?.value);
        if g.numel() != n || b.numel() != n {
            return Err(Error::Shape { op: "layer_norm", detail: format!("width {n}, gain {:?}", g.shape()) });
        }
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j].to_f64() - mean) * rs;
                xhat[r * n + j] = h;
                out.push(T::from_f64(h * g.data()[j].to_f64() + b.data()[j].to_f64()));
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let n = xv.cols();
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let row = to64(xv.row(r));
            let p = softmax64(&row);
            out.extend(p.into_iter().map(T::from_f64));
            debug_assert_eq!(out.len() % n, 0);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let t = xv.map(|v| {
            let x = v.to_f64();
            T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
        });
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg, "gelu")
    }

    /// Causal multi-head self-attention over packed `[rows, 3d]` query/key/value
    /// projections. Each segment attends only to its own earlier rows.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let xv = &self.node(qkv)?.value;
        let rows = xv.rows();
        if xv.cols() % 3 != 0 || heads == 0 || (xv.cols() / 3) % heads != 0 {
            return Err(Error::Shape {
                op: "causal_attention",
                detail: format!("width {} with {heads} heads", xv.cols()),
            });
        }
        let d = xv.cols() / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = to64(xv.data());
        let w = 3 * d;
        let segs = self.seg_ranges(rows, "causal_attention")?;
        let mut out = vec![0.0f64; rows * d];
        let prob_len: usize = segs.iter().map(|s| s.len() * s.len()).sum::<usize>() * heads;
        let mut probs = vec![0.0f64; prob_len];
        let mut off = 0;
        let mut scores = Vec::new();
        for seg in &segs {
            let len = seg.len();
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..len {
                    let qi = &src[(seg.start + i) * w + qo..][..dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &src[(seg.start + j) * w + ko..][..dh];
                        scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                    }
                    let p = softmax64(&scores);
                    let orow = &mut out[(seg.start + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        probs[off + i * len + j] = pj;
                        let vj = &src[(seg.start + j) * w + vo..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, v)| *o += pj * v);
                    }
                }
                off += len * len;
            }
        }
        let t = Tensor::matrix(rows, d, from64(&out))?;
        let rg = self.rg(&[qkv]);
        self.push(t, Op::Attention { qkv, heads, probs }, rg, "causal_attention")
    }

    /// Per-row loss of `logits` against `targets`; rows without a target
    /// contribute zero. Output is a `[rows]` vector.
    pub fn token_loss(&mut self, logits: Var, targets: &[Option<usize>], kind: TokenLossKind) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "token_loss",
                detail: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = vec![0.0f64; rows];
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Shape { op: "token_loss", detail: format!("target {t} >= vocab {vocab}") });
            }
            let z = to64(lv.row(r));
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, v) in row.iter_mut().zip(&z) {
                *p = (v - lse).exp();
            }
            let nll = lse - z[t];
            let pt = row[t];
            loss[r] = match kind {
                TokenLossKind::CrossEntropy => nll,
                TokenLossKind::Focal { gamma } => (1.0 - pt).max(0.0).powf(gamma) * nll,
                TokenLossKind::GeneralizedCe { q } => (1.0 - pt.powf(q)) / q,
            };
        }
        let t = Tensor::vector(from64(&loss));
        let rg = self.rg(&[logits]);
        self.push(t, Op::TokenLoss { logits, targets: targets.to_vec(), kind, probs }, rg, "token_loss")
    }

    /// Reverse pass from a scalar loss. Clears the tape: a second call
    /// without a new forward pass fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = &self.node(loss)?.value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let g = self.vjp(loss, &[1.0], &VjpOptions::default())?;
        self.nodes.clear();
        self.consumed = true;
        Ok(g)
    }

    /// Vector-Jacobian product: propagates `seed` (the adjoint of `output`)
    /// back to every differentiable leaf. The tape is kept, so several
    /// products can share one forward pass.
    pub fn vjp(&self, output: Var, seed: &[f64], opts: &VjpOptions) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_node = self.node(output)?;
        if seed.len() != out_node.value.numel() {
            return Err(Error::Shape {
                op: "vjp",
                detail: format!("seed of {} for output of {}", seed.len(), out_node.value.numel()),
            });
        }
        let n = self.nodes.len();
        let n_seg = if opts.per_segment { self.segments.len().max(1) } else { 0 };
        let mut tracked = vec![false; n];
        for v in &opts.row_norm_params {
            tracked[v.0] = true;
        }
        let mut bw = Backward {
            adj: vec![None; n],
            seg: vec![None; n],
            row_sq: Vec::new(),
            tracked,
            per_segment: opts.per_segment,
        };
        bw.adj[output.0] = Some(seed.to_vec());
        let stop = opts.stop_before.map(|v| v.0).unwrap_or(0);
        for id in (stop..=output.0).rev() {
            let Some(g) = bw.adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                bw.adj[id] = Some(g);
                continue;
            }
            self.backward_op(id, &g, &mut bw)?;
        }
        let mut leaf = vec![None; n];
        let mut per_segment = vec![None; n];
        for id in 0..n {
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if opts.per_segment && node.param {
                let g = bw.seg[id].take().unwrap_or_else(|| vec![0.0; node.value.numel() * n_seg]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                per_segment[id] = Some(from64(&g));
            } else if let Some(g) = bw.adj[id].take() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                leaf[id] = Some(from64(&g));
            } else if id >= stop {
                leaf[id] = Some(vec![T::ZERO; node.value.numel()]);
            }
        }
        Ok(Gradients { leaf, per_segment, n_segments: n_seg, row_sq: bw.row_sq })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn split_param(&self, v: Var, bw: &Backward, op: &'static str) -> Result<bool> {
        let node = &self.nodes[v.0];
        if bw.per_segment && node.param {
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::PerSegmentUnsupported(op));
            }
            return Ok(true);
        }
        Ok(false)
    }

    fn backward_op(&self, id: usize, g: &[f64], bw: &mut Backward) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    if self.split_param(*a, bw, "matmul lhs")? {
                        return Err(Error::PerSegmentUnsupported("matmul lhs"));
                    }
                    let b64 = to64(bv.data());
                    let mut da = vec![0.0; m * k];
                    f64::gemm(m, n, k, g, false, &b64, true, &mut da, false);
                    add_owned(&mut bw.adj[a.0], da);
                }
                if self.wants(*b) {
                    let a64 = to64(av.data());
                    if self.split_param(*b, bw, "matmul")? {
                        let segs = self.seg_ranges(m, "matmul")?;
                        let buf = bw.seg_buf(*b, k * n, segs.len());
                        for (s, r) in segs.iter().enumerate() {
                            let out = &mut buf[s * k * n..(s + 1) * k * n];
                            f64::gemm(
                                k,
                                r.len(),
                                n,
                                &a64[r.start * k..r.end * k],
                                true,
                                &g[r.start * n..r.end * n],
                                false,
                                out,
                                true,
                            );
                        }
                    } else {
                        let mut db = vec![0.0; k * n];
                        f64::gemm(k, m, n, &a64, true, g, false, &mut db, false);
                        add_owned(&mut bw.adj[b.0], db);
                    }
                    if bw.tracked[b.0] {
                        let rs = bw.rows(m);
                        for r in 0..m {
                            rs[r] += sq_norm(&a64[r * k..(r + 1) * k]) * sq_norm(&g[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut bw.adj[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut bw.adj[b.0], g);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut bw.adj[x.0], g);
                }
                if self.wants(*bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let rows = g.len() / n;
                    if self.split_param(*bias, bw, "add_bias")? {
                        let segs = self.seg_ranges(rows, "add_bias")?;
                        let buf = bw.seg_buf(*bias, n, segs.len());
                        for (s, r) in segs.iter().enumerate() {
                            let out = &mut buf[s * n..(s + 1) * n];
                            for row in r.clone() {
                                out.iter_mut().zip(&g[row * n..(row + 1) * n]).for_each(|(o, v)| *o += v);
                            }
                        }
                    } else {
                        let mut db = vec![0.0; n];
                        for row in 0..rows {
                            db.iter_mut().zip(&g[row * n..(row + 1) * n]).for_each(|(o, v)| *o += v);
                        }
                        add_owned(&mut bw.adj[bias.0], db);
                    }
                    if bw.tracked[bias.0] {
                        let rs = bw.rows(rows);
                        for r in 0..rows {
                            rs[r] += sq_norm(&g[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.wants(*a) {
                    self.no_split(*a, bw, "mul")?;
                    let d: Vec<f64> = g.iter().zip(bv.data()).map(|(g, v)| g * v.to_f64()).collect();
                    add_owned(&mut bw.adj[a.0], d);
                }
                if self.wants(*b) {
                    self.no_split(*b, bw, "mul")?;
                    let d: Vec<f64> = g.iter().zip(av.data()).map(|(g, v)| g * v.to_f64()).collect();
                    add_owned(&mut bw.adj[b.0], d);
                }
            }
            Op::Scale(x, c) => {
                self.no_split(*x, bw, "scale")?;
                add_owned(&mut bw.adj[x.0], g.iter().map(|v| v * c).collect());
            }
            Op::Sum(x) => {
                self.no_split(*x, bw, "sum")?;
                let n = self.nodes[x.0].value.numel();
                add_owned(&mut bw.adj[x.0], vec![g[0]; n]);
            }
            Op::WeightedSum(x, w) => {
                self.no_split(*x, bw, "weighted_sum")?;
                add_owned(&mut bw.adj[x.0], w.iter().map(|w| w * g[0]).collect());
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let (vocab, d) = (tv.rows(), tv.cols());
                let rows = ids.len();
                if self.split_param(*table, bw, "embedding")? {
                    let segs = self.seg_ranges(rows, "embedding")?;
                    let buf = bw.seg_buf(*table, vocab * d, segs.len());
                    for (s, r) in segs.iter().enumerate() {
                        let out = &mut buf[s * vocab * d..(s + 1) * vocab * d];
                        for row in r.clone() {
                            let dst = &mut out[ids[row] * d..(ids[row] + 1) * d];
                            dst.iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(o, v)| *o += v);
                        }
                    }
                } else {
                    let mut dt = vec![0.0; vocab * d];
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(o, v)| *o += v);
                    }
                    add_owned(&mut bw.adj[table.0], dt);
                }
                if bw.tracked[table.0] {
                    let rs = bw.rows(rows);
                    for r in 0..rows {
                        rs[r] += sq_norm(&g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.nodes[gain.0].value.numel();
                let rows = rstd.len();
                let gv = to64(self.nodes[gain.0].value.data());
                if self.wants(*x) {
                    self.no_split(*x, bw, "layer_norm input")?;
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    add_owned(&mut bw.adj[x.0], dx);
                }
                for (p, is_gain) in [(*gain, true), (*bias, false)] {
                    if !self.wants(p) {
                        continue;
                    }
                    let contrib = |r: usize, j: usize| if is_gain { g[r * n + j] * xhat[r * n + j] } else { g[r * n + j] };
                    if self.split_param(p, bw, "layer_norm")? {
                        let segs = self.seg_ranges(rows, "layer_norm")?;
                        let buf = bw.seg_buf(p, n, segs.len());
                        for (s, rg) in segs.iter().enumerate() {
                            for r in rg.clone() {
                                for j in 0..n {
                                    buf[s * n + j] += contrib(r, j);
                                }
                            }
                        }
                    } else {
                        let mut d = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                d[j] += contrib(r, j);
                            }
                        }
                        add_owned(&mut bw.adj[p.0], d);
                    }
                    if bw.tracked[p.0] {
                        let rs = bw.rows(rows);
                        for r in 0..rows {
                            rs[r] += (0..n).map(|j| contrib(r, j).powi(2)).sum::<f64>();
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                self.no_split(*x, bw, "softmax")?;
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = to64(y.row(r));
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                add_owned(&mut bw.adj[x.0], dx);
            }
            Op::Gelu(x) => {
                self.no_split(*x, bw, "gelu")?;
                let xv = &self.nodes[x.0].value;
                let dx = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| {
                        let x = v.to_f64();
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                add_owned(&mut bw.adj[x.0], dx);
            }
            Op::Attention { qkv, heads, probs } => {
                self.no_split(*qkv, bw, "causal_attention")?;
                let xv = &self.nodes[qkv.0].value;
                let rows = xv.rows();
                let d = xv.cols() / 3;
                let w = 3 * d;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = to64(xv.data());
                let mut dsrc = vec![0.0; rows * w];
                let segs = self.seg_ranges(rows, "causal_attention")?;
                let mut off = 0;
                let mut dp = Vec::new();
                for seg in &segs {
                    let len = seg.len();
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in 0..len {
                            let ri = seg.start + i;
                            let go = &g[ri * d + h * dh..][..dh];
                            let p = &probs[off + i * len..][..=i];
                            dp.clear();
                            for j in 0..=i {
                                let rj = seg.start + j;
                                let vj = &src[rj * w + vo..][..dh];
                                dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                let dvj = &mut dsrc[rj * w + vo..][..dh];
                                dvj.iter_mut().zip(go).for_each(|(o, gv)| *o += p[j] * gv);
                            }
                            let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = seg.start + j;
                                for c in 0..dh {
                                    let kj = src[rj * w + ko + c];
                                    let qi = src[ri * w + qo + c];
                                    dsrc[ri * w + qo + c] += ds * kj;
                                    dsrc[rj * w + ko + c] += ds * qi;
                                }
                            }
                        }
                        off += len * len;
                    }
                }
                add_owned(&mut bw.adj[qkv.0], dsrc);
            }
            Op::TokenLoss { logits, targets, kind, probs } => {
                self.no_split(*logits, bw, "token_loss")?;
                let vocab = self.nodes[logits.0].value.cols();
                let mut dz = vec![0.0; targets.len() * vocab];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    if g[r] == 0.0 {
                        continue;
                    }
                    let p = &probs[r * vocab..(r + 1) * vocab];
                    let pt = p[t];
                    // d loss / d z_j = coef * (delta_jt - p_j)
                    let coef = match kind {
                        TokenLossKind::CrossEntropy => -1.0,
                        TokenLossKind::Focal { gamma } => {
                            let om = (1.0 - pt).max(0.0);
                            let lead = if *gamma == 0.0 { 0.0 } else { gamma * om.powf(gamma - 1.0) * pt * pt.ln() };
                            lead - om.powf(*gamma)
                        }
                        TokenLossKind::GeneralizedCe { q } => -pt.powf(*q),
                    };
                    let out = &mut dz[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        let delta = if j == t { 1.0 } else { 0.0 };
                        out[j] = g[r] * coef * (delta - p[j]);
                    }
                }
                add_owned(&mut bw.adj[logits.0], dz);
            }
        }
        Ok(())
    }

    fn no_split(&self, v: Var, bw: &Backward, op: &'static str) -> Result<()> {
        if bw.per_segment && self.nodes[v.0].param {
            return Err(Error::PerSegmentUnsupported(op));
        }
        Ok(())
    }
}

struct Backward {
    adj: Vec<Option<Vec<f64>>>,
    seg: Vec<Option<Vec<f64>>>,
    row_sq: Vec<f64>,
    tracked: Vec<bool>,
    per_segment: bool,
}

impl Backward {
    fn seg_buf(&mut self, v: Var, numel: usize, n_seg: usize) -> &mut [f64] {
        self.seg[v.0].get_or_insert_with(|| vec![0.0; numel * n_seg])
    }

    fn rows(&mut self, rows: usize) -> &mut [f64] {
        if self.row_sq.len() < rows {
            self.row_sq.resize(rows, 0.0);
        }
        &mut self.row_sq[..rows]
    }
}

pub(crate) fn softmax64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
