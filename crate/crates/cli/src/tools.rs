//! Dataset generation, preprocessing and bundle evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use csicl_core::data::{generate, load_dataset, SynthConfig};
use csicl_core::trainer::accuracy_counts;
use csicl_edge::bundle::deserialize;
use serde_json::{json, Value};

use crate::failure::{write_output, CliResult, Failure};

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    /// Time steps per sample.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Subcarriers per time step.
    #[arg(long, default_value_t = 12)]
    pub d: usize,
    /// Signal-to-noise ratio in dB, or `inf` for noiseless samples.
    #[arg(long, default_value_t = 10.0)]
    pub snr_db: f64,
    /// Probability that a cell is flagged missing.
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth(args: &SynthArgs) -> CliResult<Value> {
    if args.snr_db.is_nan() {
        return Err(Failure::usage(anyhow!("--snr-db must be a number or inf")));
    }
    let data = generate(&SynthConfig {
        classes: args.classes,
        per_class: args.per_class,
        n: args.n,
        d: args.d,
        snr_db: args.snr_db.is_finite().then_some(args.snr_db),
        missing_rate: args.missing_rate,
        seed: args.seed,
    })?;
    write_output(&args.out, data.to_csv())?;
    Ok(json!({ "samples": data.len(), "classes": args.classes, "n": data.n, "d": data.d }))
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fills missing cells by interpolation along time.
pub fn preprocess(args: &PreprocessArgs) -> CliResult<Value> {
    let data = load_dataset(&args.input)
        .map_err(|e| Failure::from(e).context(format!("reading {}", args.input.display())))?;
    let filled: usize = data.samples.iter().map(|s| s.matrix.missing_count()).sum();
    let clean = data.interpolated()?;
    write_output(&args.out, clean.to_csv())?;
    Ok(json!({ "samples": clean.len(), "filled_cells": filled }))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model bundle, full or lightweight.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write `index,label,predicted` for every scored sample.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

/// Accuracy of a bundle on the samples of the classes it knows.
pub fn eval(args: &EvalArgs) -> CliResult<Value> {
    let bytes = std::fs::read(&args.bundle)
        .map_err(|e| Failure::usage(e).context(format!("reading {}", args.bundle.display())))?;
    let bundle = deserialize(&bytes)
        .map_err(|e| Failure::usage(e).context(format!("loading {}", args.bundle.display())))?;
    let data = load_dataset(&args.data)
        .map_err(|e| Failure::from(e).context(format!("reading {}", args.data.display())))?;
    let classes: Vec<usize> = bundle.meta.classes.iter().map(|&c| c as usize).collect();
    let subset = data.filter_classes(&classes);
    if subset.is_empty() {
        return Err(Failure::usage(anyhow!("no samples of classes {classes:?} in the dataset")));
    }
    let net = bundle.model.network();
    let (correct, total) = accuracy_counts(net, &subset)?;
    if let Some(path) = &args.predictions {
        let mut out = String::from("index,label,predicted\n");
        for (i, s) in subset.samples.iter().enumerate() {
            let x = s.matrix.interpolate_missing()?;
            let _ = writeln!(out, "{i},{},{}", s.label, net.predict(x.values())?);
        }
        write_output(path, out)?;
    }
    Ok(json!({
        "task": bundle.meta.task,
        "classes": classes,
        "samples": total,
        "correct": correct,
        "accuracy": correct as f64 / total as f64,
    }))
}
