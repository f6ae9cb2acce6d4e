use sart_core::numeric::{
    finite_difference_check, Rng, Stream, Tape, Tensor, TokenLossKind, Var, VjpOptions,
};
use sart_core::Error;

fn randn(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

/// Builds a scalar graph from a flat input vector `x` (a single leaf) and
/// checks the tape gradient against finite differences.
fn check_scalar_graph<F>(x: Vec<f64>, shape: Vec<usize>, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |v: &[f64]| -> sart_core::Result<f64> {
        let mut t = Tape::<f64>::new();
        let leaf = t.leaf(Tensor::new(shape.clone(), v.to_vec())?)?;
        let out = build(&mut t, leaf);
        t.value(out).item()
    };
    let mut tape = Tape::<f64>::new();
    let leaf = tape.leaf(Tensor::new(shape.clone(), x.clone()).unwrap().with_grad()).unwrap();
    let out = build(&mut tape, leaf);
    let g = tape.backward(out).unwrap();
    let analytic = g.get(leaf).unwrap().to_vec();
    let mut rng = Rng::new(11, Stream::Check);
    finite_difference_check(eval, &x, &analytic, 1e-3, &mut rng).unwrap()
}

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

/// Random projection to a scalar so every output coordinate matters.
fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let n = t.value(v).numel();
    let mut rng = Rng::with_stream_id(seed, 99);
    let w = randn(&mut rng, n, 1.0);
    t.weighted_sum(v, &w).unwrap()
}

#[test]
fn matmul_gradient_both_operands() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 1);
        let (m, k, n) = (3, 4, 2);
        let other = randn(&mut rng, k * n, 1.0);
        let x = randn(&mut rng, m * k, 1.0);
        let err = check_scalar_graph(x, vec![m, k], |t, a| {
            let b = t.leaf(Tensor::matrix(k, n, other.clone()).unwrap()).unwrap();
            let y = t.matmul(a, b).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "lhs {seed}: {err}");
        let lhs = randn(&mut rng, m * k, 1.0);
        let x = randn(&mut rng, k * n, 1.0);
        let err = check_scalar_graph(x, vec![k, n], |t, b| {
            let a = t.leaf(Tensor::matrix(m, k, lhs.clone()).unwrap()).unwrap();
            let y = t.matmul(a, b).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "rhs {seed}: {err}");
    }
}

#[test]
fn elementwise_ops_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 2);
        let x = randn(&mut rng, 6, 1.0);
        let other = randn(&mut rng, 6, 1.0);
        let bias = randn(&mut rng, 3, 1.0);
        let err = check_scalar_graph(x.clone(), vec![2, 3], |t, a| {
            let b = t.leaf(Tensor::matrix(2, 3, other.clone()).unwrap()).unwrap();
            let s = t.add(a, b).unwrap();
            let p = t.mul(s, a).unwrap();
            let q = t.scale(p, -0.7).unwrap();
            let bb = t.leaf(Tensor::vector(bias.clone())).unwrap();
            let r = t.add_bias(q, bb).unwrap();
            project(t, r, seed)
        });
        assert!(err < TOL, "{seed}: {err}");
        let err = check_scalar_graph(x.clone(), vec![6], |t, a| {
            let g = t.gelu(a).unwrap();
            project(t, g, seed)
        });
        assert!(err < TOL, "gelu {seed}: {err}");
        let err = check_scalar_graph(bias.clone(), vec![3], |t, b| {
            let a = t.leaf(Tensor::matrix(2, 3, other.clone()).unwrap()).unwrap();
            let r = t.add_bias(a, b).unwrap();
            project(t, r, seed)
        });
        assert!(err < TOL, "bias {seed}: {err}");
    }
}

#[test]
fn softmax_and_layer_norm_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 3);
        let x = randn(&mut rng, 12, 1.5);
        let err = check_scalar_graph(x.clone(), vec![3, 4], |t, a| {
            let s = t.softmax(a).unwrap();
            project(t, s, seed)
        });
        assert!(err < TOL, "softmax {seed}: {err}");
        let gain = randn(&mut rng, 4, 1.0);
        let bias = randn(&mut rng, 4, 1.0);
        let err = check_scalar_graph(x.clone(), vec![3, 4], |t, a| {
            let g = t.leaf(Tensor::vector(gain.clone())).unwrap();
            let b = t.leaf(Tensor::vector(bias.clone())).unwrap();
            let y = t.layer_norm(a, g, b).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "layer_norm input {seed}: {err}");
        let err = check_scalar_graph(gain.clone(), vec![4], |t, g| {
            let a = t.leaf(Tensor::matrix(3, 4, x.clone()).unwrap()).unwrap();
            let b = t.leaf(Tensor::vector(bias.clone())).unwrap();
            let y = t.layer_norm(a, g, b).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "layer_norm gain {seed}: {err}");
    }
}

#[test]
fn embedding_gradient() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 4);
        let table = randn(&mut rng, 5 * 3, 1.0);
        let ids = [0usize, 3, 3, 1];
        let err = check_scalar_graph(table, vec![5, 3], |t, tab| {
            let e = t.embedding(tab, &ids).unwrap();
            project(t, e, seed)
        });
        assert!(err < TOL, "{seed}: {err}");
    }
}

#[test]
fn attention_gradient_with_segments() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 5);
        let (rows, d) = (7, 4);
        let x = randn(&mut rng, rows * 3 * d, 0.8);
        let err = check_scalar_graph_segments(x, vec![rows, 3 * d], &[3, 4], |t, a| {
            let y = t.causal_attention(a, 2).unwrap();
            project(t, y, seed)
        });
        assert!(err < TOL, "{seed}: {err}");
    }
}

fn check_scalar_graph_segments<F>(x: Vec<f64>, shape: Vec<usize>, segs: &[usize], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let eval = |v: &[f64]| -> sart_core::Result<f64> {
        let mut t = Tape::<f64>::with_segments(segs);
        let leaf = t.leaf(Tensor::new(shape.clone(), v.to_vec())?)?;
        let out = build(&mut t, leaf);
        t.value(out).item()
    };
    let mut tape = Tape::<f64>::with_segments(segs);
    let leaf = tape.leaf(Tensor::new(shape.clone(), x.clone()).unwrap().with_grad()).unwrap();
    let out = build(&mut tape, leaf);
    let g = tape.backward(out).unwrap();
    let analytic = g.get(leaf).unwrap().to_vec();
    let mut rng = Rng::new(11, Stream::Check);
    finite_difference_check(eval, &x, &analytic, 1e-3, &mut rng).unwrap()
}

#[test]
fn token_loss_gradients_for_every_kind() {
    let kinds = [
        TokenLossKind::CrossEntropy,
        TokenLossKind::Focal { gamma: 2.0 },
        TokenLossKind::Focal { gamma: 0.5 },
        TokenLossKind::GeneralizedCe { q: 0.7 },
    ];
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 6);
        let x = randn(&mut rng, 4 * 5, 1.0);
        let targets = [Some(1), None, Some(4), Some(0)];
        for kind in kinds {
            let err = check_scalar_graph(x.clone(), vec![4, 5], |t, z| {
                let l = t.token_loss(z, &targets, kind).unwrap();
                project(t, l, seed)
            });
            assert!(err < TOL, "{kind:?} {seed}: {err}");
        }
    }
}

/// Two-layer MLP with every parameter as a differentiable leaf; the check
/// runs over the concatenation of all parameters.
fn mlp_loss(t: &mut Tape<f64>, params: &[f64], x: &[f64], grad: bool) -> (Var, Vec<Var>) {
    let (n_in, hidden, n_out, batch) = (3, 5, 4, 2);
    let mut off = 0;
    let mut take = |shape: Vec<usize>, t: &mut Tape<f64>| {
        let n: usize = shape.iter().product();
        let tensor = Tensor::new(shape, params[off..off + n].to_vec()).unwrap();
        off += n;
        t.leaf(if grad { tensor.with_grad() } else { tensor }).unwrap()
    };
    let w1 = take(vec![n_in, hidden], t);
    let b1 = take(vec![hidden], t);
    let w2 = take(vec![hidden, n_out], t);
    let b2 = take(vec![n_out], t);
    let input = t.leaf(Tensor::matrix(batch, n_in, x.to_vec()).unwrap()).unwrap();
    let h = t.matmul(input, w1).unwrap();
    let h = t.add_bias(h, b1).unwrap();
    let h = t.gelu(h).unwrap();
    let o = t.matmul(h, w2).unwrap();
    let o = t.add_bias(o, b2).unwrap();
    let l = t.token_loss(o, &[Some(2), Some(0)], TokenLossKind::CrossEntropy).unwrap();
    let s = t.sum(l).unwrap();
    (s, vec![w1, b1, w2, b2])
}

const MLP_PARAMS: usize = 3 * 5 + 5 + 5 * 4 + 4;

#[test]
fn random_two_layer_mlp_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::with_stream_id(seed, 7);
        let params = randn(&mut rng, MLP_PARAMS, 0.7);
        let x = randn(&mut rng, 6, 1.0);
        let mut t = Tape::<f64>::new();
        let (loss, leaves) = mlp_loss(&mut t, &params, &x, true);
        let g = t.backward(loss).unwrap();
        let analytic: Vec<f64> = leaves.iter().flat_map(|&v| g.get(v).unwrap().to_vec()).collect();
        let f = |p: &[f64]| {
            let mut t = Tape::<f64>::new();
            let (l, _) = mlp_loss(&mut t, p, &x, false);
            t.value(l).item()
        };
        let mut crng = Rng::new(seed, Stream::Check);
        let err = finite_difference_check(f, &params, &analytic, 1e-3, &mut crng).unwrap();
        assert!(err < TOL, "{seed}: {err}");
    }
}

#[test]
fn chain_rule_linearity() {
    // backward(a f + b g) == a backward(f) + b backward(g)
    let mut rng = Rng::new(3, Stream::Check);
    let x = randn(&mut rng, 8, 1.0);
    let (a, b) = (0.7, -1.9);
    let grad_of = |ca: f64, cb: f64| {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(Tensor::matrix(2, 4, x.clone()).unwrap().with_grad()).unwrap();
        let f = t.softmax(v).unwrap();
        let f = t.weighted_sum(f, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 1.0]).unwrap();
        let g = t.gelu(v).unwrap();
        let g = t.sum(g).unwrap();
        let fa = t.scale(f, ca).unwrap();
        let gb = t.scale(g, cb).unwrap();
        let s = t.add(fa, gb).unwrap();
        t.backward(s).unwrap().get(v).unwrap().to_vec()
    };
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    for i in 0..8 {
        assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-6);
    }
}

#[test]
fn trivial_examples() {
    // matmul with identity-extended factor returns the leading block
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
    let i = t.leaf(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap()).unwrap();
    let y = t.matmul(a, i).unwrap();
    assert_eq!(t.value(y).data(), &[1., 2., 4., 5.]);

    let z = t.leaf(Tensor::matrix(1, 3, vec![0., 0., 0.]).unwrap()).unwrap();
    let s = t.softmax(z).unwrap();
    for &p in t.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-7);
    }

    // -log softmax(20,0,0)[0] = ln(1 + 2e^-20) ~ 4.1e-9
    let l = t.leaf(Tensor::matrix(1, 3, vec![20., 0., 0.]).unwrap()).unwrap();
    let ce = t.token_loss(l, &[Some(0)], TokenLossKind::CrossEntropy).unwrap();
    let v = t.value(ce).data()[0];
    let oracle = (1.0f64 + 2.0 * (-20.0f64).exp()).ln();
    assert!(v < 1e-6 && (v as f64 - oracle).abs() < 1e-9);
}

#[test]
fn sum_and_half_square_gradients() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap().with_grad()).unwrap();
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![3.0, 4.0]).with_grad()).unwrap();
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let h = t.scale(s, 0.5).unwrap();
    let g = t.backward(h).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![1.0]).with_grad()).unwrap();
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
    // a new forward pass re-arms the tape
    let x = t.leaf(Tensor::vector(vec![1.0]).with_grad()).unwrap();
    let s = t.sum(x).unwrap();
    assert!(t.backward(s).is_ok());
}

#[test]
fn shape_errors_and_non_scalar_backward() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
    let b = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
    assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    let c = t.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap()).unwrap();
    assert!(t.add(a, c).is_err());
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad()).unwrap();
    assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::vector(vec![f32::MAX, f32::MAX]).with_grad()).unwrap();
    assert!(matches!(t.add(a, a), Err(Error::NonFinite(_))));
}

#[test]
fn requires_grad_propagates() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let s = t.add(a, b).unwrap();
    let total = t.sum(s).unwrap();
    // nothing differentiable: backward succeeds but yields no leaf gradients
    let g = t.backward(total).unwrap();
    assert!(g.get(a).is_none());
}

/// Tiny two-segment network with params used the way the transformer uses
/// them: embedding, layer norm, bias, matmul, attention, token loss.
fn segmented_net(t: &mut Tape<f64>, params: &[Vec<f64>], ids: &[usize], targets: &[Option<usize>]) -> (Var, Vec<Var>) {
    let d = 4;
    let emb = t.param(Tensor::matrix(6, d, params[0].clone()).unwrap()).unwrap();
    let g = t.param(Tensor::vector(params[1].clone())).unwrap();
    let b = t.param(Tensor::vector(params[2].clone())).unwrap();
    let wqkv = t.param(Tensor::matrix(d, 3 * d, params[3].clone()).unwrap()).unwrap();
    let wout = t.param(Tensor::matrix(d, 6, params[4].clone()).unwrap()).unwrap();
    let bout = t.param(Tensor::vector(params[5].clone())).unwrap();
    let x = t.embedding(emb, ids).unwrap();
    let h = t.layer_norm(x, g, b).unwrap();
    let qkv = t.matmul(h, wqkv).unwrap();
    let a = t.causal_attention(qkv, 2).unwrap();
    let r = t.add(a, x).unwrap();
    let o = t.matmul(r, wout).unwrap();
    let o = t.add_bias(o, bout).unwrap();
    let l = t.token_loss(o, targets, TokenLossKind::CrossEntropy).unwrap();
    (l, vec![emb, g, b, wqkv, wout, bout])
}

fn net_params(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::with_stream_id(seed, 8);
    let d = 4;
    vec![
        randn(&mut rng, 6 * d, 1.0),
        randn(&mut rng, d, 0.3).iter().map(|v| 1.0 + v).collect(),
        randn(&mut rng, d, 0.3),
        randn(&mut rng, d * 3 * d, 0.5),
        randn(&mut rng, d * 6, 0.5),
        randn(&mut rng, 6, 0.1),
    ]
}

#[test]
fn per_segment_gradients_equal_independent_tapes() {
    let params = net_params(1);
    let ids_a = [1usize, 2, 3];
    let ids_b = [4usize, 0, 5, 2];
    let tg_a = [Some(2), None, Some(5)];
    let tg_b = [Some(0), Some(5), None, Some(1)];

    let ids: Vec<usize> = ids_a.iter().chain(&ids_b).copied().collect();
    let tgs: Vec<Option<usize>> = tg_a.iter().chain(&tg_b).copied().collect();
    let mut t = Tape::<f64>::with_segments(&[3, 4]);
    let (l, leaves) = segmented_net(&mut t, &params, &ids, &tgs);
    let opts = VjpOptions { per_segment: true, ..Default::default() };
    let seg = t.vjp(l, &vec![1.0; 7], &opts).unwrap();
    let summed = t.vjp(l, &vec![1.0; 7], &VjpOptions::default()).unwrap();

    for (s, (ids, tg)) in [(&ids_a[..], &tg_a[..]), (&ids_b[..], &tg_b[..])].iter().enumerate() {
        let mut ts = Tape::<f64>::new();
        let (ls, lv) = segmented_net(&mut ts, &params, ids, tg);
        let loss = ts.sum(ls).unwrap();
        let g = ts.backward(loss).unwrap();
        for (p, q) in leaves.iter().zip(&lv) {
            let a = seg.segment(*p, s).unwrap();
            let b = g.get(*q).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10, "segment {s}: {x} vs {y}");
            }
        }
    }
    for p in &leaves {
        let total = summed.get(*p).unwrap();
        let n = total.len();
        for i in 0..n {
            let s = seg.segment(*p, 0).unwrap()[i] + seg.segment(*p, 1).unwrap()[i];
            assert!((s - total[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn row_norms_equal_per_token_gradient_norms_for_row_local_params() {
    // wout and bout only touch rows through row-local ops, so each row's
    // gradient contribution is exactly the per-token gradient.
    let params = net_params(2);
    let ids = [1usize, 2, 3, 4];
    let tgs = [Some(2), Some(3), None, Some(0)];
    let mut t = Tape::<f64>::new();
    let (l, leaves) = segmented_net(&mut t, &params, &ids, &tgs);
    let tail = vec![leaves[4], leaves[5]];
    let opts = VjpOptions { row_norm_params: tail.clone(), ..Default::default() };
    let g = t.vjp(l, &[1.0; 4], &opts).unwrap();
    let norms = g.row_sq_norms().to_vec();
    for r in 0..4 {
        let mut seed = [0.0; 4];
        seed[r] = 1.0;
        let one = t.vjp(l, &seed, &VjpOptions::default()).unwrap();
        let want: f64 = tail.iter().map(|&p| one.get(p).unwrap().iter().map(|v| v * v).sum::<f64>()).sum();
        assert!((norms[r] - want).abs() < 1e-10 * (1.0 + want), "row {r}: {} vs {want}", norms[r]);
    }
    assert_eq!(norms[2], 0.0);
}

#[test]
fn per_segment_rejects_params_in_unsupported_positions() {
    let mut t = Tape::<f64>::with_segments(&[2]);
    let p = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let s = t.softmax(p).unwrap();
    let total = t.sum(s).unwrap();
    let opts = VjpOptions { per_segment: true, ..Default::default() };
    assert!(matches!(t.vjp(total, &[1.0], &opts), Err(Error::PerSegmentUnsupported(_))));
}
