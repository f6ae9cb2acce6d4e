use proptest::prelude::*;
use sart_core::data::{generate_dataset, LabelMode, Task, TaskSpec};
use sart_core::diagnostics::ShortcutDiagnostics;
use sart_core::metrics::{
    accuracy, accuracy_of, aggregate, detection_f1, f1_score, grad_alignment_metric, is_consistent, pearson, read_report_csv,
    reasoning_consistency, write_aggregate_csv, write_report_csv, MetricsReport,
};
use sart_core::model::{init_params, ModelConfig};
use sart_core::numeric::{Rng, Stream};
use sart_core::par::Exec;
use sart_core::Error;

#[test]
fn rule_oracles_score_as_expected_on_every_task() {
    for task in Task::ALL {
        let spec = TaskSpec::new(task);
        let d = generate_dataset(&spec, 2).unwrap();
        let by = |rule: &dyn Fn(&[u8]) -> bool, split: &[sart_core::data::Sample]| {
            let preds: Vec<usize> = split.iter().map(|s| rule(&s.features) as usize).collect();
            accuracy_of(&preds, split).unwrap()
        };
        let truth = |f: &[u8]| spec.true_rule(f);
        let shortcut = |f: &[u8]| spec.shortcut_rule(f);
        assert_eq!(by(&truth, &d.test_clean), 100.0);
        assert_eq!(by(&truth, &d.test_perturbed), 100.0);
        assert_eq!(by(&shortcut, &d.test_clean), 100.0);
        assert_eq!(by(&shortcut, &d.test_perturbed), 0.0);
    }
}

#[test]
fn constant_answer_scores_the_label_share() {
    let d = generate_dataset(&TaskSpec::new(Task::MathArithmetic), 0).unwrap();
    let ones = d.val.iter().filter(|s| s.true_label == 1).count() as f64;
    let share = 100.0 * ones / d.val.len() as f64;
    assert!((accuracy_of(&vec![1; d.val.len()], &d.val).unwrap() - share).abs() < 1e-9);
    assert!((accuracy_of(&vec![0; d.val.len()], &d.val).unwrap() - (100.0 - share)).abs() < 1e-9);
    assert!(matches!(accuracy_of(&[], &[]), Err(Error::Empty(_))));
}

#[test]
fn accuracy_of_a_model_is_a_percentage() {
    let d = generate_dataset(&TaskSpec::new(Task::CausalReasoning), 0).unwrap();
    let p = init_params(ModelConfig::small(), &mut Rng::new(0, Stream::Init)).unwrap();
    let a = accuracy(&p, &d.test_clean[..50], Exec::Sequential).unwrap();
    assert!((0.0..=100.0).contains(&a));
    let r = reasoning_consistency(&p, &d.test_clean[..50], Exec::Parallel).unwrap();
    assert!((0.0..=100.0).contains(&r));
    assert!(accuracy(&p, &[], Exec::Sequential).is_err());
}

#[test]
fn consistency_needs_correct_intermediates() {
    let d = generate_dataset(&TaskSpec::new(Task::MathArithmetic), 0).unwrap();
    let s = &d.test_clean[0];
    let perfect: Vec<usize> = s.token_ids[s.reasoning_span.range()].iter().chain(&[s.answer_token()]).copied().collect();
    assert!(is_consistent(s.task, s, &perfect));
    // answer right, first digit of the sum wrong
    let mut wrong = perfect.clone();
    let pos = wrong.iter().position(|&t| t < 10).unwrap();
    wrong[pos] = (wrong[pos] + 1) % 10;
    assert!(!is_consistent(s.task, s, &wrong));
    let mut flipped = perfect.clone();
    *flipped.last_mut().unwrap() = 1 - s.answer_token();
    assert!(!is_consistent(s.task, s, &flipped));
}

fn diag(score: f64) -> ShortcutDiagnostics {
    ShortcutDiagnostics { score, ..Default::default() }
}

#[test]
fn detection_f1_examples() {
    let truth = [true, false, true, true, false];
    let exact: Vec<_> = truth.iter().map(|&t| diag(if t { 0.4 } else { 0.0 })).collect();
    assert_eq!(detection_f1(&exact, &truth).unwrap(), Some(1.0));
    let none: Vec<_> = truth.iter().map(|_| diag(0.0)).collect();
    assert_eq!(detection_f1(&none, &truth).unwrap(), Some(0.0));
    assert_eq!(detection_f1(&exact, &[false; 5]).unwrap(), None);
    assert!(detection_f1(&exact, &[true; 4]).is_err());
}

proptest! {
    #[test]
    fn f1_ignores_order(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60), seed in any::<u64>()) {
        let (flags, truth): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        Rng::new(seed, Stream::Check).shuffle(&mut idx);
        let f2: Vec<bool> = idx.iter().map(|&i| flags[i]).collect();
        let t2: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
        prop_assert_eq!(f1_score(&flags, &truth).unwrap(), f1_score(&f2, &t2).unwrap());
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(
        x in prop::collection::vec(-5.0f64..5.0, 3..40),
        a in 0.1f64..10.0, b in -10.0f64..10.0, c in 0.1f64..10.0, e in -10.0f64..10.0,
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v - i as f64).collect();
        let r = match pearson(&x, &y) { Ok(r) => r, Err(_) => return Ok(()) };
        let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let y2: Vec<f64> = y.iter().map(|v| c * v + e).collect();
        prop_assert!((pearson(&x2, &y2).unwrap() - r).abs() < 1e-6);
    }
}

#[test]
fn pearson_rejects_degenerate_input() {
    assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::ZeroVariance)));
}

#[test]
fn gradient_alignment_of_identical_sets_is_one() {
    let d = generate_dataset(&TaskSpec::new(Task::FinancialAnalysis).with_label_mode(LabelMode::ShortcutLabels), 0).unwrap();
    let p = init_params(ModelConfig::small(), &mut Rng::new(1, Stream::Init)).unwrap();
    let a = grad_alignment_metric(&p, &d.val[..20], &d.val[..20], Exec::Sequential).unwrap();
    assert!((a - 1.0).abs() < 1e-9);
    let b = grad_alignment_metric(&p, &d.train[..20], &d.val[..20], Exec::Sequential).unwrap();
    assert!((-1.0..=1.0).contains(&b));
}

fn report(method: &str, task: Task, seed: u64, acc: f64, f1: Option<f64>) -> MetricsReport {
    MetricsReport {
        method: method.into(),
        task,
        seed,
        clean_accuracy: acc,
        robustness: acc / 2.0,
        reasoning_consistency: acc,
        detection_f1: f1,
        grad_alignment: -0.1,
        pearson_r: None,
        runtime_seconds: 1.5,
        seconds_per_epoch: 0.5,
    }
}

#[test]
fn reports_round_trip_and_aggregate() {
    let rows = vec![
        report("sft", Task::MathArithmetic, 0, 80.0, None),
        report("sart", Task::MathArithmetic, 0, 90.0, Some(0.6)),
        report("sft", Task::CausalReasoning, 0, 60.0, None),
        report("sart", Task::CausalReasoning, 0, 70.0, Some(0.4)),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_report_csv(&path, &rows).unwrap();
    let back = read_report_csv(&path).unwrap();
    assert_eq!(back, rows);
    let agg = aggregate(&back);
    assert_eq!(agg.len(), 2);
    assert_eq!(agg[0].method, "sft");
    assert_eq!(agg[0].clean_accuracy, 70.0);
    assert_eq!(agg[0].detection_f1, None);
    assert!((agg[1].detection_f1.unwrap() - 0.5).abs() < 1e-12);
    let apath = dir.path().join("aggregate.csv");
    write_aggregate_csv(&apath, &agg).unwrap();
    let first = std::fs::read(&apath).unwrap();
    write_aggregate_csv(&apath, &aggregate(&read_report_csv(&path).unwrap())).unwrap();
    assert_eq!(first, std::fs::read(&apath).unwrap());
}
