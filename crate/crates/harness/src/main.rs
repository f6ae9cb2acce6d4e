use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sart_core::data::{generate_dataset, write_dataset, LabelMode, Task, TaskSpec};
use sart_core::model::ModelConfig;
use sart_core::par::Exec;
use sart_core::trainer::{Ablation, Method, TrainConfig};

use sart_harness::experiment::{self, ablation_spec};
use sart_harness::grid::{self, GridSpec};
use sart_harness::store::{ResultStore, RunSpec};
use sart_harness::{cost, report};

/// Shortcut-aware reasoning training: synthetic data, training, evaluation,
/// hyperparameter grids and reports. Every command prints a JSON summary on
/// success and a JSON error object on stderr on failure.
#[derive(Parser, Debug)]
#[command(name = "sart", version)]
struct Cli {
    /// Results root; runs live under `<root>/runs`.
    #[arg(long, env = "SART_OUT", default_value = "results", global = true)]
    root: PathBuf,
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, env = "SART_THREADS", global = true)]
    threads: Option<usize>,
    /// Run every loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a dataset as JSON-lines files.
    GenData {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_label_mode, default_value = "shortcut_labels")]
        label_mode: LabelMode,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method (or ablation variant) and evaluate it.
    Train {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, value_parser = parse_method, default_value = "sart")]
        method: Method,
        /// Single-component variant of SART; overrides --method.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory from gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Retrain even when a result with the same configuration exists.
        #[arg(long)]
        force: bool,
    },
    /// Re-evaluate a stored run from its checkpoint.
    Eval {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grid search over lambda, gamma and rho.
    Grid {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tables and figure data from every completed run.
    Report {
        /// Output directory (default `<root>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render SVG figures.
        #[arg(long)]
        svg: bool,
    },
    /// Per-epoch cost of SART relative to SFT.
    Cost {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON training configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size: full, desk or small.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_label_mode, default_value = "shortcut_labels")]
    label_mode: LabelMode,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: sart_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: sart_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: sart_core::Error| e.to_string())
}

fn parse_label_mode(s: &str) -> Result<LabelMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown label mode `{s}` (true_rule or shortcut_labels)"))
}

impl ConfigArgs {
    fn build(&self, exec: Exec) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.model = ModelConfig::preset(p)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.exec = exec;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.cmd {
        Cmd::GenData { task, seed, label_mode, out } => {
            let data = generate_dataset(&TaskSpec::new(task).with_label_mode(label_mode), seed)?;
            write_dataset(&data, &out)?;
            Ok(json!({
                "task": task, "seed": seed, "out": out,
                "train": data.train.len(), "val": data.val.len(),
                "test_clean": data.test_clean.len(), "test_perturbed": data.test_perturbed.len(),
            }))
        }
        Cmd::Train { task, method, ablation, seed, data, cfg, force } => {
            let base = cfg.build(exec)?;
            let store = ResultStore::open(&cli.root)?;
            let split = experiment::load_data(task, cfg.label_mode, seed, data.as_deref())?;
            let mut spec = match ablation {
                Some(v) => ablation_spec(task, split.spec.label_mode, split.seed, &base, v),
                None => RunSpec::new(task, split.spec.label_mode, method, split.seed, &base),
            };
            spec.train.seed = seed;
            let dir = store.run_dir(&spec);
            if force && dir.exists() {
                std::fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
            let report = experiment::run(&store, &spec, &split)?;
            Ok(json!({ "run": dir, "metrics": report }))
        }
        Cmd::Eval { run, data } => {
            let split = data.as_deref().map(sart_core::data::read_dataset).transpose()?;
            let report = experiment::evaluate_run(&run, split.as_ref())?;
            Ok(json!({ "run": run, "metrics": report }))
        }
        Cmd::Grid { task, seeds, lambdas, gammas, rhos, cfg } => {
            let base = cfg.build(exec)?;
            let store = ResultStore::open(cli.root.join("grid"))?;
            let mut spec = GridSpec::default();
            spec.lambdas = lambdas.unwrap_or(spec.lambdas);
            spec.gammas = gammas.unwrap_or(spec.gammas);
            spec.rhos = rhos.unwrap_or(spec.rhos);
            let result = grid::run_grid(&store, task, cfg.label_mode, &base, &spec, &seeds)?;
            let out = store.root().join(task.name());
            grid::write_grid(&out, &result)?;
            let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
            Ok(json!({ "task": task, "cells": result.cells.len(), "failed": failed, "out": out, "marginals": result.marginals }))
        }
        Cmd::Report { out, svg } => {
            let store = ResultStore::open(&cli.root)?;
            let out = out.unwrap_or_else(|| cli.root.join("report"));
            let summary = report::write_report(&store, &out, svg)?;
            Ok(serde_json::to_value(summary)?)
        }
        Cmd::Cost { task, seed, cfg } => {
            let base = cfg.build(exec)?;
            let data = experiment::load_data(task, cfg.label_mode, seed, None)?;
            let r = cost::measure(&data, &TrainConfig { seed, ..base })?;
            Ok(serde_json::to_value(r)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string().trim(), "kind": "usage" }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": format!("{e:#}"), "kind": "runtime" }));
            ExitCode::FAILURE
        }
    }
}
