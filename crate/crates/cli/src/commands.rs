use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use sesame_core::checkpoint;
use sesame_core::data::{
    cell_counts, gen_biased_split, gen_hans_style_sized, gen_local_pattern_task, read_examples, write_cases,
    write_sequences, DiagnosticCase, Example,
};
use sesame_core::grad_scopes::{check_scope, Scope};
use sesame_core::gradcheck::DEFAULT_TOLERANCE;
use sesame_core::rng::derive_seed;
use sesame_core::train::{best_cell, run, sigma_sweep};
use sesame_core::{evaluate, Metrics, Model};

use crate::config::RunConfig;
use crate::{CliError, Task};

const LOCAL_TRAIN_SIZE: usize = 1000;
const HANS_TRAIN_SIZE: usize = 2000;
const DEV_SIZE: usize = 500;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `path` through `body`, mapping IO failures to exit code 2.
pub fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> sesame_core::Result<()>) -> Result<(), CliError> {
    let fail = |e: &dyn std::fmt::Display| CliError::usage(format!("cannot write {}: {e}", path.display()));
    let file = fs::File::create(path).map_err(|e| fail(&e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(|e| fail(&e))?;
    w.flush().map_err(|e| fail(&e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
        writeln!(w)?;
        Ok(())
    })
}

fn label_counts(examples: &[Example]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        *counts.entry(format!("label_{}", e.label)).or_insert(0) += 1;
    }
    counts
}

fn case_summary(cases: &[DiagnosticCase]) -> serde_json::Value {
    let examples: Vec<Example> = cases.iter().map(DiagnosticCase::to_example).collect();
    let tagged = cases.iter().any(|c| c.tag.is_some());
    let cells: BTreeMap<String, usize> = if tagged {
        cell_counts(cases)
            .into_iter()
            .map(|((h, s), n)| (format!("{h}/{s}"), n))
            .collect()
    } else {
        BTreeMap::new()
    };
    json!({ "total": cases.len(), "labels": label_counts(&examples), "cells": cells })
}

pub fn gen_data(
    task: Task,
    seed: u64,
    out: &Path,
    size: Option<usize>,
    dev_size: Option<usize>,
    per_case: usize,
) -> Result<(), CliError> {
    create_dir(out)?;
    let dev_seed = derive_seed(seed, 1);
    let dev_size = dev_size.unwrap_or(DEV_SIZE);
    let files = match task {
        Task::Local => {
            let train = gen_local_pattern_task(seed, size.unwrap_or(LOCAL_TRAIN_SIZE))?;
            let dev = gen_local_pattern_task(dev_seed, dev_size)?;
            let mut files = BTreeMap::new();
            for (name, split) in [("train.tsv", &train), ("dev.tsv", &dev)] {
                write_file(&out.join(name), |w| write_sequences(w, split))?;
                files.insert(name, json!({ "total": split.len(), "labels": label_counts(split) }));
            }
            files
        }
        Task::HansStyle => {
            let corpus = gen_hans_style_sized(seed, per_case, size.unwrap_or(HANS_TRAIN_SIZE))?;
            let dev = gen_biased_split(dev_seed, dev_size)?;
            let mut files = BTreeMap::new();
            for (name, split) in [("train.tsv", &corpus.train), ("dev.tsv", &dev), ("diagnostic.tsv", &corpus.diagnostic)] {
                write_file(&out.join(name), |w| write_cases(w, split))?;
                files.insert(name, case_summary(split));
            }
            files
        }
    };
    let task_name = match task {
        Task::Local => "local",
        Task::HansStyle => "hans-style",
    };
    write_json(&out.join("manifest.json"), &json!({ "task": task_name, "seed": seed, "files": files }))?;
    println!("wrote {} files and manifest.json to {}", files.len(), out.display());
    Ok(())
}

struct Splits {
    train: Option<Vec<Example>>,
    dev: Option<Vec<Example>>,
    diagnostic: Option<Vec<Example>>,
}

impl Splits {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let read = |p: &Option<std::path::PathBuf>| -> Result<Option<Vec<Example>>, CliError> {
            p.as_deref()
                .map(|p| {
                    read_examples(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))
                })
                .transpose()
        };
        Ok(Self {
            train: read(&cfg.train_path)?,
            dev: read(&cfg.dev_path)?,
            diagnostic: read(&cfg.diagnostic_path)?,
        })
    }

    /// Dev first, so the diagnostic split (when given) supplies the
    /// heuristic table.
    fn eval_splits(&self) -> Vec<(&str, &[Example])> {
        let mut out = Vec::new();
        if let Some(d) = &self.dev {
            out.push(("dev", d.as_slice()));
        }
        if let Some(d) = &self.diagnostic {
            out.push(("diagnostic", d.as_slice()));
        }
        out
    }
}

fn print_accuracies(metrics: &Metrics) {
    for (split, acc) in &metrics.split_accuracies {
        println!("{split} accuracy {acc:.4}");
    }
}

fn save_run(dir: &Path, model: &Model, metrics: &Metrics) -> Result<(), CliError> {
    create_dir(dir)?;
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&ckpt, &model.params())
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", ckpt.display())))?;
    write_json(&dir.join("metrics.json"), metrics)?;
    if let Some(table) = &metrics.heuristic_table {
        write_file(&dir.join("heuristics.csv"), |w| table.write_csv(w))?;
    }
    Ok(())
}

pub fn train(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    RunConfig::require(&cfg.train_path, "train_path")?;
    let splits = Splits::load(&cfg)?;
    let train_split = splits.train.as_deref().expect("required above");
    let (model, metrics) = run(&cfg.train, train_split, &splits.eval_splits())?;
    save_run(&cfg.out_dir, &model, &metrics)?;
    print_accuracies(&metrics);
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

pub fn eval(config: &Path, checkpoint_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let splits = Splits::load(&cfg)?;
    let eval_splits = splits.eval_splits();
    if eval_splits.is_empty() {
        return Err(CliError::usage("eval needs `dev_path` or `diagnostic_path` in the config"));
    }
    let params = checkpoint::load(checkpoint_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", checkpoint_path.display())))?;
    let mut model = Model::init(&cfg.train.model, cfg.train.seed)?;
    model.load_params(&params)?;

    let mut metrics = Metrics {
        config: cfg.train.clone(),
        per_step_loss: Vec::new(),
        split_accuracies: BTreeMap::new(),
        heuristic_table: None,
        layer_weights: None,
    };
    for (name, split) in eval_splits {
        let e = evaluate(&model, split)?;
        metrics.split_accuracies.insert(name.to_string(), e.accuracy);
        metrics.heuristic_table = e.heuristic_table;
        metrics.layer_weights = e.layer_weights;
    }
    let dir = cfg.out_dir.join("eval");
    create_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    if let Some(table) = &metrics.heuristic_table {
        write_file(&dir.join("heuristics.csv"), |w| table.write_csv(w))?;
    }
    print_accuracies(&metrics);
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep_threads() -> Result<usize, CliError> {
    match std::env::var("SESAME_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("SESAME_THREADS must be a positive integer, got {v:?}"))),
    }
}

pub fn sweep(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    RunConfig::require(&cfg.train_path, "train_path")?;
    RunConfig::require(&cfg.dev_path, "dev_path")?;
    if cfg.train.model.encoder.attention.blur_mode == sesame_core::BlurMode::None {
        log::warn!("blur_mode is none, so every sweep cell trains the same architecture");
    }
    let splits = Splits::load(&cfg)?;
    let (train_split, dev) = (
        splits.train.as_deref().expect("required above"),
        splits.dev.as_deref().expect("required above"),
    );
    let cells = sigma_sweep(&cfg.train, &cfg.sigma_grid, train_split, dev, sweep_threads()?)?;
    create_dir(&cfg.out_dir)?;
    for cell in &cells {
        if let Ok((_, (model, metrics))) = &cell.outcome {
            save_run(&cfg.out_dir.join(format!("sigma_{}", cell.index)), model, metrics)?;
        }
    }
    let best = best_cell(&cells);
    write_file(&cfg.out_dir.join("summary.csv"), |w| {
        writeln!(w, "index,sigma,seed,dev_accuracy,best,status")?;
        for c in &cells {
            let acc = c.dev_accuracy().map(|a| a.to_string()).unwrap_or_default();
            let status = match &c.outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => e.replace([',', '\n'], " "),
            };
            writeln!(w, "{},{},{},{acc},{},{status}", c.index, c.sigma, c.seed, best == Some(c.index))?;
        }
        Ok(())
    })?;
    for c in &cells {
        match c.dev_accuracy() {
            Some(a) => println!("sigma {} dev accuracy {a:.4}", c.sigma),
            None => println!("sigma {} failed", c.sigma),
        }
    }
    if best.is_none() {
        return Err(CliError {
            code: 3,
            message: "every sweep cell failed".into(),
        });
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

pub fn gradcheck(scopes: &[Scope], seed: u64, inject_error: bool) -> Result<(), CliError> {
    let scopes = if scopes.is_empty() { &Scope::ALL[..] } else { scopes };
    let mut failure = None;
    for &scope in scopes {
        let r = check_scope(scope, seed, inject_error)?;
        println!(
            "{scope}: max relative error {:.3e} at {}[{}] over {} entries",
            r.max_relative_error, r.worst_param, r.worst_index, r.entries_checked
        );
        if !r.passes(DEFAULT_TOLERANCE) && failure.is_none() {
            failure = Some(format!(
                "{scope}: parameter {}[{}] has relative error {:.3e} (analytic {}, numeric {}), above {DEFAULT_TOLERANCE:e}",
                r.worst_param, r.worst_index, r.max_relative_error, r.analytic, r.numeric
            ));
        }
    }
    match failure {
        None => Ok(()),
        Some(msg) => Err(CliError::check(msg)),
    }
}
