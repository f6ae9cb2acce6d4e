use std::path::Path;
use std::process::{Command, Output};

use sart_harness::grid::{marginals, GridCell, GridSpec};
use sart_harness::report::{score_pearson, weight_curve, ScorePoint};

fn sart(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sart"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json summary")
}

fn err_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr).lines().filter(|l| l.starts_with('{')).last().unwrap_or_default().to_string();
    serde_json::from_str(&line).expect("json error")
}

const SMALL: &[&str] = &["--preset", "small", "--epochs", "2"];

#[test]
fn gen_data_writes_split_sizes_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    for dir in [&a, &b] {
        ok_json(&sart(t.path(), &["gen-data", "--task", "math", "--seed", "0", "--out", dir.to_str().unwrap()]));
    }
    for (name, n) in [("train", 2000), ("val", 500), ("test_clean", 500), ("test_perturbed", 500)] {
        let file = format!("{name}.jsonl");
        let bytes = std::fs::read(a.join(&file)).unwrap();
        assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), n, "{name}");
        assert_eq!(bytes, std::fs::read(b.join(&file)).unwrap(), "{name}");
    }
}

#[test]
fn unknown_task_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let out = sart(t.path(), &["gen-data", "--task", "poetry", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["kind"], "usage");
}

#[test]
fn runtime_failures_report_json() {
    let t = tempfile::tempdir().unwrap();
    let out = sart(t.path(), &["report"]);
    assert_eq!(out.status.code(), Some(1));
    let e = err_json(&out);
    assert_eq!(e["kind"], "runtime");
    assert!(e["error"].as_str().unwrap().contains("no completed runs"));
    let out = sart(t.path(), &["train", "--task", "math", "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_report_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok_json(&sart(t.path(), &["gen-data", "--task", "causal", "--seed", "1", "--out", data.to_str().unwrap()]));
    let mut args = vec!["train", "--task", "causal", "--method", "sart", "--seed", "1", "--data", data.to_str().unwrap()];
    args.extend(SMALL);
    let trained = ok_json(&sart(t.path(), &args));
    let run = trained["run"].as_str().unwrap().to_string();
    for f in ["config.json", "metrics.json", "params.ckpt", "train_log.json", "train_log.csv", "diagnostics.csv", "warmup_diagnostics.csv"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }
    let evaluated = ok_json(&sart(t.path(), &["eval", "--run", &run]));
    assert_eq!(evaluated["metrics"], trained["metrics"]);

    // a second invocation reuses the stored run
    let again = ok_json(&sart(t.path(), &args));
    assert_eq!(again["metrics"], trained["metrics"]);

    let mut sft = vec!["train", "--task", "causal", "--method", "sft", "--seed", "1"];
    sft.extend(SMALL);
    ok_json(&sart(t.path(), &sft));
    let summary = ok_json(&sart(t.path(), &["report", "--svg"]));
    assert_eq!(summary["runs"], 2);
    assert_eq!(summary["methods"], serde_json::json!(["sft", "sart"]));
    let report = t.path().join("report");
    for f in ["report.csv", "aggregate.csv", "per_task.csv", "fig5a_score_vs_shortcut.csv", "fig5c_weight_curve.csv", "fig5c_weight_curve.svg", "fig5a_score_vs_shortcut.svg"] {
        assert!(report.join(f).exists(), "{f}");
    }

    // aggregate rows are the means of the per-run rows, and the files are stable
    let rows = sart_core::metrics::read_report_csv(&report.join("report.csv")).unwrap();
    let agg = sart_core::metrics::aggregate(&rows);
    let sft_row = rows.iter().find(|r| r.method == "sft").unwrap();
    assert_eq!(agg[0].clean_accuracy, sft_row.clean_accuracy);
    let before = std::fs::read(report.join("aggregate.csv")).unwrap();
    ok_json(&sart(t.path(), &["report"]));
    assert_eq!(before, std::fs::read(report.join("aggregate.csv")).unwrap());

    // the annotated r is the r of the dumped points
    let points: Vec<ScorePoint> = csv::Reader::from_path(report.join("fig5a_score_vs_shortcut.csv")).unwrap().deserialize().map(Result::unwrap).collect();
    let r = score_pearson(&points).unwrap();
    assert_eq!(summary["pearson_r"], serde_json::json!(r));
}

#[test]
fn weight_curve_is_the_closed_form() {
    let c = weight_curve(3.0);
    assert_eq!(c.len(), 201);
    for (i, &(s, w)) in c.iter().enumerate() {
        assert!((s - i as f64 * 0.01).abs() < 1e-12);
        assert_eq!(w, (-3.0 * s).exp());
    }
}

#[test]
fn grid_resumes_and_marginalizes() {
    let t = tempfile::tempdir().unwrap();
    let args = ["grid", "--task", "math", "--preset", "small", "--epochs", "1", "--lambdas", "1,3", "--gammas", "0.5", "--rhos", "0.1,0.7"];
    let first = ok_json(&sart(t.path(), &args));
    assert_eq!(first["cells"], 4);
    assert_eq!(first["failed"], 0);
    assert_eq!(first["marginals"].as_array().unwrap().len(), 2 + 1 + 2);
    let out = t.path().join("grid").join("math_arithmetic");
    let cells = std::fs::read(out.join("grid_cells.csv")).unwrap();
    let margs = std::fs::read(out.join("grid_marginals.csv")).unwrap();

    // drop one finished cell to simulate an interruption
    let runs = t.path().join("grid").join("runs");
    let victim = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(victim.join("metrics.json")).unwrap();
    ok_json(&sart(t.path(), &args));
    assert_eq!(cells, std::fs::read(out.join("grid_cells.csv")).unwrap());
    assert_eq!(margs, std::fs::read(out.join("grid_marginals.csv")).unwrap());

    let mut r = csv::Reader::from_path(out.join("grid_cells.csv")).unwrap();
    let rows: Vec<GridCell> = r.deserialize().map(Result::unwrap).collect();
    for c in &rows {
        let recomputed = 0.4 * c.clean_accuracy.unwrap() + 0.6 * c.robustness.unwrap();
        assert!((c.combined.unwrap() - recomputed).abs() < 0.05);
    }
    assert!(rows.windows(2).all(|w| w[0].combined >= w[1].combined));
}

#[test]
fn default_grid_has_eighty_cells_and_thirteen_marginals() {
    let g = GridSpec::default();
    assert_eq!(g.cells().len(), 80);
    let cells: Vec<GridCell> = g
        .cells()
        .into_iter()
        .map(|(lambda, gamma, rho)| GridCell {
            lambda,
            gamma,
            rho,
            seed: 0,
            clean_accuracy: Some(90.0),
            robustness: Some(lambda * 10.0),
            combined: Some(g.combined(90.0, lambda * 10.0)),
            error: None,
        })
        .collect();
    let m = marginals(&cells, &g);
    assert_eq!(m.len(), 13);
    let l3 = m.iter().find(|r| r.param == "lambda" && r.value == 3.0).unwrap();
    assert_eq!(l3.cells, 16);
    assert!((l3.robustness - 30.0).abs() < 1e-12);
    assert!(m.iter().filter(|r| r.param == "gamma").all(|r| r.cells == 20));
}

#[test]
fn cost_reports_a_ratio_of_at_least_one() {
    let t = tempfile::tempdir().unwrap();
    let r = ok_json(&sart(t.path(), &["cost", "--task", "financial", "--preset", "small", "--epochs", "10"]));
    assert!(r["ratio"].as_f64().unwrap() >= 1.0, "{r}");
    assert!(r["projected_run_seconds"].as_f64().unwrap() > 0.0);
}
