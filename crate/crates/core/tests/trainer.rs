use sart_core::data::{generate_dataset, DatasetSplit, LabelMode, Task, TaskSpec};
use sart_core::diagnostics::validation_gradient;
use sart_core::model::{Forward, ModelConfig, Scope};
use sart_core::numeric::{dot, Rng, Stream, TokenLossKind};
use sart_core::optim::{AdamW, AdamWConfig, CosineSchedule};
use sart_core::par::Exec;
use sart_core::surgery::{SartConfig, SurgeryMode};
use sart_core::trainer::{train, Ablation, Method, TrainConfig, Trainer};
use sart_core::Error;

fn data(task: Task, mode: LabelMode, n_train: usize) -> DatasetSplit {
    let mut d = generate_dataset(&TaskSpec::new(task).with_label_mode(mode), 0).unwrap();
    d.train.truncate(n_train);
    d.val.truncate(64);
    d
}

fn base(method: Method) -> TrainConfig {
    TrainConfig { method, model: ModelConfig::small(), eval_each_epoch: false, record_diagnostics: false, ..Default::default() }
}

fn batches(n: usize, steps: usize, bsz: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(5, Stream::Shuffle);
    (0..steps)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(bsz);
            idx
        })
        .collect()
}

fn assert_same_trajectory(sart: SartConfig, steps: usize) {
    let d = data(Task::MathArithmetic, LabelMode::ShortcutLabels, 256);
    let mut cfg_sft = base(Method::Sft);
    cfg_sft.epochs = 4;
    let mut cfg_sart = cfg_sft.clone();
    cfg_sart.method = Method::Sart;
    cfg_sart.sart = SartConfig { warmup_epochs: 0, ..sart };
    let mut a = Trainer::new(cfg_sft, &d).unwrap();
    let mut b = Trainer::new(cfg_sart, &d).unwrap();
    for (i, batch) in batches(d.train.len(), steps, 64).iter().enumerate() {
        a.train_step_on(batch, false).unwrap();
        b.train_step_on(batch, true).unwrap();
        let same = a.params.flat().iter().zip(b.params.flat()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "trajectories diverge at step {i}");
    }
}

#[test]
fn neutral_sart_reproduces_sft_bitwise() {
    let sart = SartConfig { lambda: 0.0, gamma: 0.0, rho: 0.0, ..Default::default() };
    assert_same_trajectory(sart, 100);
}

#[test]
fn inactive_hinges_reproduce_sft_bitwise() {
    let sart = SartConfig { tau_a: -1.0, tau_r: 1.0, ..Default::default() };
    assert_same_trajectory(sart, 10);
}

#[test]
fn adamw_matches_reference_trace() {
    // reference: textbook AdamW with decoupled decay
    let cfg = AdamWConfig::default();
    let n = 7;
    let mut rng = Rng::new(9, Stream::Check);
    let mut theta: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut reference = theta.clone();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut opt = AdamW::new(n, cfg);
    let sched = CosineSchedule { base: 1e-2, total_steps: 50 };
    for t in 1..=50 {
        let grad: Vec<f64> = theta.iter().map(|x| 2.0 * x + 0.1 * rng.normal()).collect();
        let lr = sched.lr(t - 1);
        opt.step(&mut theta, &grad, lr).unwrap();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32));
            reference[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * reference[i]);
        }
        for i in 0..n {
            assert!((theta[i] - reference[i]).abs() <= 1e-6 * (1.0 + reference[i].abs()), "step {t}");
        }
    }
    assert_eq!(opt.steps(), 50);
}

#[test]
fn step_count_follows_epochs_and_batches() {
    let d = data(Task::CausalReasoning, LabelMode::TrueRule, 130);
    let mut cfg = base(Method::Sft);
    cfg.epochs = 2;
    let (_, log) = train(cfg.clone(), &d).unwrap();
    assert_eq!(log.steps, 2 * 130usize.div_ceil(64));
    assert_eq!(log.epochs.len(), 2);
    assert_eq!(cfg.steps_per_epoch(130), 3);
}

#[test]
fn training_is_deterministic_per_seed() {
    let d = data(Task::FinancialAnalysis, LabelMode::TrueRule, 128);
    let mut cfg = base(Method::Sft);
    cfg.epochs = 1;
    let (p1, _) = train(cfg.clone(), &d).unwrap();
    let (p2, _) = train(cfg.clone(), &d).unwrap();
    assert_eq!(p1.flat(), p2.flat());
    cfg.seed = 1;
    let (p3, _) = train(cfg, &d).unwrap();
    assert_ne!(p1.flat(), p3.flat());
}

#[test]
fn focal_with_zero_focus_is_cross_entropy() {
    let d = data(Task::MathArithmetic, LabelMode::TrueRule, 128);
    let mut cfg = base(Method::Sft);
    cfg.epochs = 1;
    let (sft, _) = train(cfg.clone(), &d).unwrap();
    cfg.method = Method::Focal;
    cfg.method_params.focal_gamma = 0.0;
    let (focal, _) = train(cfg, &d).unwrap();
    assert_eq!(sft.flat(), focal.flat());
    let refs: Vec<_> = d.train[..4].iter().collect();
    let ce = Forward::<f32>::new(&sft, &refs, false, TokenLossKind::CrossEntropy).unwrap();
    let fl = Forward::<f32>::new(&sft, &refs, false, TokenLossKind::Focal { gamma: 0.0 }).unwrap();
    assert_eq!(ce.sample_losses(Scope::Full).unwrap(), fl.sample_losses(Scope::Full).unwrap());
}

#[test]
fn huge_lambda_with_active_scores_stalls_the_gradient() {
    let d = data(Task::MathArithmetic, LabelMode::ShortcutLabels, 64);
    let mut cfg = base(Method::Sart);
    cfg.sart = SartConfig { tau_a: 1.0, lambda: 1e4, warmup_epochs: 0, ..Default::default() };
    let mut t = Trainer::new(cfg, &d).unwrap();
    let g = t.sart_gradient(&(0..16).collect::<Vec<_>>()).unwrap();
    assert!(dot(&g, &g).sqrt() < 1e-30);
}

#[test]
fn single_projected_sample_is_orthogonal_to_validation_gradient() {
    let d = data(Task::MathArithmetic, LabelMode::ShortcutLabels, 64);
    let mut cfg = base(Method::Sart);
    cfg.sart = SartConfig { tau_a: 1.0, rho: 0.0, warmup_epochs: 0, ..Default::default() };
    let mut t = Trainer::new(cfg, &d).unwrap();
    let g_v = validation_gradient(&t.params, &d.val, Exec::Sequential).unwrap();
    let g = t.sart_gradient(&[3]).unwrap();
    let c = dot(&g, &g_v) / (dot(&g, &g).sqrt() * dot(&g_v, &g_v).sqrt());
    assert!(c.abs() < 1e-5, "cosine {c}");
    assert_eq!(t.log.events.len(), 1);
    assert!(t.log.events[0].applied_projection && !t.log.events[0].applied_suppression);
    assert!(t.log.events[0].post_alignment.abs() < 1e-5);
}

#[test]
fn divergence_aborts_with_state_dump() {
    let d = data(Task::MathArithmetic, LabelMode::TrueRule, 128);
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.json");
    let mut cfg = base(Method::Sft);
    cfg.epochs = 3;
    cfg.learning_rate = 1e5;
    cfg.divergence_dump = Some(dump.clone());
    match train(cfg, &d) {
        Err(Error::Diverged { step, .. }) => assert!(step > 0),
        other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l.steps)),
    }
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap();
    assert!(v.get("step").is_some() && v.get("loss").is_some());
}

#[test]
fn group_dro_needs_all_groups() {
    let mut d = data(Task::MathArithmetic, LabelMode::TrueRule, 256);
    let g0 = d.train[0].group;
    d.train.retain(|s| s.group == g0);
    let mut cfg = base(Method::GroupDro);
    cfg.epochs = 1;
    assert!(matches!(train(cfg, &d), Err(Error::MissingGroups)));
}

#[test]
fn baselines_run_and_record_flags() {
    let d = data(Task::MathArithmetic, LabelMode::ShortcutLabels, 128);
    for method in [Method::DataFiltering, Method::Jtt, Method::GroupDro, Method::Lff, Method::Focal, Method::SelfConsistencyEval] {
        let mut cfg = base(method);
        cfg.epochs = 2;
        cfg.method_params.baseline_warmup_epochs = 1;
        let (p, log) = train(cfg, &d).unwrap();
        assert!(p.flat().iter().all(|v| v.is_finite()));
        assert_eq!(log.epochs.len(), 2, "{method}");
        let flagged = matches!(method, Method::DataFiltering | Method::Jtt);
        assert_eq!(log.flagged.is_some(), flagged, "{method}");
    }
}

#[test]
fn filtering_drops_mostly_shortcut_samples() {
    let d = generate_dataset(&TaskSpec::new(Task::MathArithmetic).with_label_mode(LabelMode::ShortcutLabels), 0).unwrap();
    let mut cfg = base(Method::DataFiltering);
    cfg.model = ModelConfig::desk();
    cfg.epochs = 6;
    let (_, log) = train(cfg, &d).unwrap();
    let dropped = log.flagged.unwrap();
    assert!(!dropped.is_empty());
    let hits = dropped.iter().filter(|&&i| d.train[i].shortcut_consistent).count();
    let precision = hits as f64 / dropped.len() as f64;
    assert!(precision >= 0.6, "precision {precision}");
}

#[test]
fn minimax_mode_keeps_perturbation_bounded() {
    let d = data(Task::MathArithmetic, LabelMode::ShortcutLabels, 192);
    let mut cfg = base(Method::Sart);
    cfg.epochs = 2;
    cfg.sart = SartConfig { surgery_mode: SurgeryMode::Minimax, warmup_epochs: 0, ..Default::default() };
    let mut t = Trainer::new(cfg.clone(), &d).unwrap();
    let before = t.params.flat().to_vec();
    for batch in batches(d.train.len(), 6, 64) {
        t.train_step_on(&batch, true).unwrap();
        let st = t.minimax_state().unwrap();
        let theta = dot(t.params.flat(), t.params.flat()).sqrt();
        let xi = st.xi.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(xi <= cfg.sart.minimax.eps_frac * theta * 1.001 + 1e-9);
        assert!(!st.subspace.is_empty());
    }
    assert_ne!(before, t.params.flat());
    assert!(t.sart_gradient(&[0]).is_err());
}

#[test]
fn ablations_adjust_the_method() {
    let b = TrainConfig::default();
    let r = Ablation::ReweightOnly.apply(&b);
    assert_eq!((r.method, r.sart.gamma, r.sart.rho, r.sart.surgery_mode), (Method::Sart, 0.0, 0.0, SurgeryMode::Off));
    let s = Ablation::SurgeryOnly.apply(&b);
    assert!(s.sart.unit_weights && s.sart.lambda == 3.0);
    assert_eq!(Ablation::Full.apply(&b).sart, SartConfig::default());
    assert_eq!("surgery_only".parse::<Ablation>().unwrap(), Ablation::SurgeryOnly);
}
