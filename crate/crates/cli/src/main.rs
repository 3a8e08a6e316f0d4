//! `teleop`: generate, ingest, featurise, train, evaluate, sweep, reconstruct
//! and defend, each step writing its outputs plus a JSON manifest.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use teleop_core::dataset::{apply_scaler, clean, fit_scaler, stratified_split, SplitSpec};
use teleop_core::defense::ChannelTransform;
use teleop_core::emulator::{generate_dataset, GridCell, RobotProfile, TlsChannelModel};
use teleop_core::experiment::{
    open_world_relabel, render_report, run_experiment, run_workflow_experiment, write_atomic, write_report_dir,
    CellReport, Condition, ExperimentSpec, ReportFormat, SweepReport, WorkflowSpec,
};
use teleop_core::features::{build_matrix, FeatureMatrix};
use teleop_core::nn::{evaluate, train, MlpModel, TrainParams};
use teleop_core::pcap::{parse_pcap, ParseOptions};
use teleop_core::trace::{assemble_flows, read_canonical, write_canonical, FlowTrace, DEFAULT_FLOW_GAP_S};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Traffic analysis of TLS-encrypted teleoperated robot channels")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emulate sessions over a grid and write a canonical trace file.
    Generate {
        /// Grid JSON: {"cells": [...], "samples_per_cell": N, "seed": N}.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Read a classic pcap capture into unlabelled canonical traces.
    Import {
        pcap: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Idle gap in seconds that separates flows.
        #[arg(long, default_value_t = DEFAULT_FLOW_GAP_S)]
        gap: f64,
        /// IPv4 address of the controller; otherwise the SYN sender is.
        #[arg(long)]
        controller: Option<std::net::Ipv4Addr>,
    },
    /// Turn traces into the per-packet feature CSV.
    Extract {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relabel the last U movement classes as Unknown.
        #[arg(long, default_value_t = 0)]
        unknowns: usize,
    },
    /// Clean, split, scale and train a classifier on a feature CSV.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON with optional "training" and "split" objects.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a model on a feature CSV or a trace file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "traces", required_unless_present = "traces")]
        features: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an experiment spec: one trained model per condition.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write an SVG chart of feature importances.
        #[arg(long)]
        svg: bool,
    },
    /// Reconstruct emulated workflows from classified movements.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Use true movement labels instead of a classifier.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Apply a countermeasure to traces, optionally re-evaluating a model.
    Defend {
        #[arg(long)]
        traces: PathBuf,
        /// Transform JSON, e.g. {"kind": "fixed-cell", "cell_size": 514}.
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "out_dir")]
        model: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render a saved report.json.
    Report {
        input: PathBuf,
        /// csv, md or svg.
        #[arg(long, default_value = "md")]
        format: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Parse JSON, naming the offending key on failure.
fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("{}: at `{}`: {}", origin.display(), path, e.inner())
    })
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text, path)
}

/// Fail early when `path` cannot be created.
fn check_writable(path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.is_dir() {
        bail!("output directory {} does not exist", dir.display());
    }
    let probe = dir.join(format!(".teleop-probe-{}", std::process::id()));
    File::create(&probe).with_context(|| format!("output directory {} is not writable", dir.display()))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn check_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    check_writable(&dir.join("x"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    write_atomic(path, &body)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(path: &Path, command: &str, body: Value) -> Result<()> {
    let mut m = json!({ "tool": "teleop", "version": env!("CARGO_PKG_VERSION"), "command": command });
    if let (Value::Object(dst), Value::Object(src)) = (&mut m, body) {
        dst.extend(src);
    }
    write_json(path, &m)
}

fn read_traces(path: &Path) -> Result<Vec<FlowTrace>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_canonical(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_traces(path: &Path, flows: &[FlowTrace]) -> Result<u64> {
    let mut buf = Vec::new();
    let n = write_canonical(flows, &mut buf)?;
    write_atomic(path, &buf)?;
    Ok(n)
}

fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    FeatureMatrix::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn packet_count(flows: &[FlowTrace]) -> usize {
    flows.iter().map(|f| f.packets.len()).sum()
}

fn default_samples_per_cell() -> usize {
    10
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct GenerateConfig {
    cells: Vec<GridCell>,
    #[serde(default = "default_samples_per_cell")]
    samples_per_cell: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    tls: TlsChannelModel,
    #[serde(default)]
    robot: RobotProfile,
}

fn cmd_generate(ctx: &Ctx, grid: &Path, out: &Path, seed: Option<u64>, samples: Option<usize>) -> Result<()> {
    check_writable(out)?;
    let mut cfg: GenerateConfig = load_json(grid)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = samples {
        cfg.samples_per_cell = n;
    }
    ctx.note(format!("emulating {} cells x {} samples", cfg.cells.len(), cfg.samples_per_cell));
    let flows =
        generate_dataset(&cfg.cells, cfg.samples_per_cell, cfg.seed, &cfg.tls, &cfg.robot).context("generate")?;
    let bytes = write_traces(out, &flows)?;
    write_manifest(
        &manifest_path(out),
        "generate",
        json!({ "config": cfg, "outputs": [out], "flows": flows.len(), "packets": packet_count(&flows), "bytes": bytes }),
    )?;
    ctx.note(format!("wrote {} flows to {}", flows.len(), out.display()));
    Ok(())
}

fn cmd_import(ctx: &Ctx, pcap: &Path, out: &Path, gap: f64, controller: Option<std::net::Ipv4Addr>) -> Result<()> {
    check_writable(out)?;
    if !(gap.is_finite() && gap > 0.0) {
        bail!("import: --gap must be positive");
    }
    let bytes = std::fs::read(pcap).with_context(|| format!("reading {}", pcap.display()))?;
    let cap = parse_pcap(&bytes, &ParseOptions { controller }).context("import")?;
    let flows = assemble_flows(&cap.records, gap);
    write_traces(out, &flows)?;
    write_manifest(
        &manifest_path(out),
        "import",
        json!({
            "input": pcap, "outputs": [out], "gap_s": gap, "records": cap.records.len(),
            "flows": flows.len(), "skipped_non_tcp": cap.skipped_non_tcp,
            "skipped_truncated": cap.skipped_truncated,
        }),
    )?;
    println!(
        "imported {} packets in {} flows; skipped {} non-TCP and {} truncated frames",
        cap.records.len(),
        flows.len(),
        cap.skipped_non_tcp,
        cap.skipped_truncated
    );
    ctx.note(format!("wrote {}", out.display()));
    Ok(())
}

fn cmd_extract(ctx: &Ctx, traces: &Path, out: &Path, unknowns: usize) -> Result<()> {
    check_writable(out)?;
    let flows = read_traces(traces)?;
    let m = open_world_relabel(&build_matrix(&flows), unknowns).context("extract")?;
    let mut buf = Vec::new();
    m.write_csv(&mut buf).context("extract")?;
    write_atomic(out, &buf)?;
    write_manifest(
        &manifest_path(out),
        "extract",
        json!({ "input": traces, "outputs": [out], "rows": m.n_rows(), "classes": m.class_names, "unknowns": unknowns }),
    )?;
    ctx.note(format!("wrote {} rows to {}", m.n_rows(), out.display()));
    Ok(())
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    #[serde(default)]
    training: TrainParams,
    #[serde(default)]
    split: SplitSpec,
}

fn cmd_train(
    ctx: &Ctx,
    features: &Path,
    out: &Path,
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    check_writable(out)?;
    let mut cfg: TrainConfig = match config {
        Some(p) => load_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.training.epochs = e;
    }
    if let Some(s) = seed {
        cfg.training.seed = s;
        cfg.split.seed = s;
    }
    let raw = read_features(features)?;
    let (m, cleaned) = clean(&raw).context("dataset")?;
    let split = stratified_split(&m, &cfg.split).context("dataset")?;
    let scaler = fit_scaler(&split.train).context("dataset")?;
    let tr = apply_scaler(&scaler, &split.train)?;
    let va = apply_scaler(&scaler, &split.validation)?;
    let te = apply_scaler(&scaler, &split.test)?;
    ctx.note(format!("training on {} rows ({} columns)", tr.n_rows(), tr.n_cols()));
    let (mut model, curve) = train(&cfg.training, &tr, &va).context("train")?;
    model.scaler = Some(scaler);
    let report = evaluate(&model, &te).context("evaluate")?;
    write_json(out, &model)?;
    let curve_path = out.with_extension("curve.json");
    write_json(&curve_path, &curve)?;
    write_manifest(
        &manifest_path(out),
        "train",
        json!({
            "input": features, "outputs": [out, curve_path], "config": cfg,
            "dropped_columns": cleaned.dropped_columns, "dropped_rows": cleaned.dropped_rows,
            "rows": { "train": tr.n_rows(), "validation": va.n_rows(), "test": te.n_rows() },
            "hidden_size": model.config.hidden_size, "best_epoch": curve.best_epoch,
            "test_accuracy": report.per_row.accuracy, "test_flow_macro_accuracy": report.per_flow.macro_accuracy,
        }),
    )?;
    println!(
        "test accuracy: per packet {:.3}, per flow {:.3} (macro {:.3})",
        report.per_row.accuracy, report.per_flow.accuracy, report.per_flow.macro_accuracy
    );
    Ok(())
}

/// Bring a raw matrix into the model's columns and scale.
fn prepare_for(model: &MlpModel, raw: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut m = raw.select_columns(&model.columns).context("model columns missing from input")?;
    if let Some(s) = &model.scaler {
        for i in 0..m.n_rows() {
            s.scale_row(m.row_mut(i));
        }
    }
    Ok(m)
}

fn single_cell_report(name: &str, transform: &str, model: &MlpModel, m: &FeatureMatrix) -> Result<SweepReport> {
    let eval = evaluate(model, m).context("evaluate")?;
    let flows = eval.flows.len();
    Ok(SweepReport {
        name: name.to_string(),
        transform: transform.to_string(),
        open_world_unknowns: 0,
        cells: vec![CellReport {
            label: name.to_string(),
            condition: Condition::default(),
            n_flows: flows,
            n_rows: m.n_rows(),
            dropped_columns: Vec::new(),
            hidden_size: model.config.hidden_size,
            epochs_run: 0,
            best_epoch: 0,
            eval,
            importance: None,
        }],
    })
}

fn write_report_outputs(dir: &Path, report: &SweepReport, svg: bool) -> Result<Vec<PathBuf>> {
    let mut paths = write_report_dir(report, dir, svg)?;
    let json_path = dir.join("report.json");
    write_json(&json_path, report)?;
    paths.push(json_path);
    Ok(paths)
}

fn cmd_eval(ctx: &Ctx, model: &Path, features: Option<&Path>, traces: Option<&Path>, out_dir: &Path) -> Result<()> {
    check_dir(out_dir)?;
    let model: MlpModel = load_json(model)?;
    let (raw, input) = match (features, traces) {
        (Some(f), _) => (read_features(f)?, f.to_path_buf()),
        (None, Some(t)) => (build_matrix(&read_traces(t)?), t.to_path_buf()),
        (None, None) => bail!("eval: pass --features or --traces"),
    };
    let m = prepare_for(&model, &raw)?;
    let report = single_cell_report("eval", "none", &model, &m)?;
    let paths = write_report_outputs(out_dir, &report, false)?;
    write_manifest(&out_dir.join("manifest.json"), "eval", json!({ "input": input, "outputs": paths }))?;
    let e = &report.cells[0].eval;
    println!("accuracy: per packet {:.3}, per flow {:.3}", e.per_row.accuracy, e.per_flow.accuracy);
    ctx.note(format!("wrote report to {}", out_dir.display()));
    Ok(())
}

fn cmd_sweep(
    ctx: &Ctx,
    config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    samples: Option<usize>,
    epochs: Option<usize>,
    svg: bool,
) -> Result<()> {
    check_dir(out_dir)?;
    let mut spec: ExperimentSpec = load_json(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = samples {
        spec.samples_per_class = n;
    }
    if let Some(e) = epochs {
        spec.training.epochs = e;
    }
    ctx.note(format!("running {} condition(s) of {}", spec.conditions.len(), spec.name));
    let run = run_experiment(&spec).context("sweep")?;
    let mut paths = write_report_outputs(out_dir, &run.report, svg)?;
    for (i, model) in run.models.iter().enumerate() {
        let p = out_dir.join(format!("model-{i:02}.json"));
        write_json(&p, model)?;
        paths.push(p);
    }
    write_manifest(&out_dir.join("manifest.json"), "sweep", json!({ "spec": spec, "outputs": paths }))?;
    for c in &run.report.cells {
        println!("{}: per-flow macro accuracy {:.3}", c.label, c.eval.per_flow.macro_accuracy);
    }
    Ok(())
}

fn cmd_reconstruct(
    ctx: &Ctx,
    config: &Path,
    out_dir: &Path,
    oracle: bool,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    check_dir(out_dir)?;
    let mut spec: WorkflowSpec = load_json(config)?;
    spec.oracle |= oracle;
    if let Some(s) = seed {
        spec.classifier.seed = s;
    }
    if let Some(e) = epochs {
        spec.classifier.training.epochs = e;
    }
    ctx.note(format!("reconstructing {} samples per workflow", spec.samples_per_workflow));
    let report = run_workflow_experiment(&spec).context("reconstruct")?;
    let json_path = out_dir.join("workflow.json");
    write_json(&json_path, &report)?;
    let mut md = String::from("| Operation | Recovery Rate | Samples |\n|---|---:|---:|\n");
    for (name, r) in &report.recovery {
        md.push_str(&format!("| {name} | {:.0}% | {} |\n", r.rate * 100.0, r.total));
    }
    md.push_str(&format!(
        "\nMean recovery {:.3}; movement accuracy {:.3}; ambiguous {}\n",
        report.mean_recovery, report.movement_accuracy, report.ambiguous
    ));
    let md_path = out_dir.join("workflow.md");
    write_atomic(&md_path, md.as_bytes())?;
    write_manifest(
        &out_dir.join("manifest.json"),
        "reconstruct",
        json!({ "spec": spec, "outputs": [json_path, md_path] }),
    )?;
    print!("{md}");
    Ok(())
}

fn cmd_defend(
    ctx: &Ctx,
    traces: &Path,
    transform: &Path,
    out: &Path,
    model: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<()> {
    check_writable(out)?;
    if let Some(d) = out_dir {
        check_dir(d)?;
    }
    let t: ChannelTransform = load_json(transform)?;
    t.validate().context("defend")?;
    let flows = read_traces(traces)?;
    let defended: Vec<FlowTrace> = flows.iter().map(|f| t.apply(f)).collect::<Result<_, _>>().context("defend")?;
    write_traces(out, &defended)?;
    let mut outputs = vec![out.to_path_buf()];
    if let (Some(model_path), Some(dir)) = (model, out_dir) {
        let model: MlpModel = load_json(model_path)?;
        let m = prepare_for(&model, &build_matrix(&defended))?;
        let report = single_cell_report("defended", t.name(), &model, &m)?;
        outputs.extend(write_report_outputs(dir, &report, false)?);
        let e = &report.cells[0].eval;
        println!(
            "after {}: accuracy per packet {:.3}, per flow {:.3}",
            t.name(),
            e.per_row.accuracy,
            e.per_flow.accuracy
        );
    }
    write_manifest(
        &manifest_path(out),
        "defend",
        json!({ "input": traces, "transform": t, "outputs": outputs, "flows": defended.len(), "packets": packet_count(&defended) }),
    )?;
    ctx.note(format!("wrote {}", out.display()));
    Ok(())
}

fn cmd_report(input: &Path, format: &str, out: Option<&Path>) -> Result<()> {
    let fmt: ReportFormat = format.parse()?;
    let report: SweepReport = load_json(input)?;
    let text = render_report(&report, fmt)?;
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { quiet: cli.quiet };
    match cli.command {
        Command::Generate { grid, out, seed, samples } => cmd_generate(&ctx, &grid, &out, seed, samples),
        Command::Import { pcap, out, gap, controller } => cmd_import(&ctx, &pcap, &out, gap, controller),
        Command::Extract { traces, out, unknowns } => cmd_extract(&ctx, &traces, &out, unknowns),
        Command::Train { features, out, config, epochs, seed } => {
            cmd_train(&ctx, &features, &out, config.as_deref(), epochs, seed)
        }
        Command::Eval { model, features, traces, out_dir } => {
            cmd_eval(&ctx, &model, features.as_deref(), traces.as_deref(), &out_dir)
        }
        Command::Sweep { config, out_dir, seed, samples, epochs, svg } => {
            cmd_sweep(&ctx, &config, &out_dir, seed, samples, epochs, svg)
        }
        Command::Reconstruct { config, out_dir, oracle, seed, epochs } => {
            cmd_reconstruct(&ctx, &config, &out_dir, oracle, seed, epochs)
        }
        Command::Defend { traces, transform, out, model, out_dir } => {
            cmd_defend(&ctx, &traces, &transform, &out, model.as_deref(), out_dir.as_deref())
        }
        Command::Report { input, format, out } => cmd_report(&input, &format, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
