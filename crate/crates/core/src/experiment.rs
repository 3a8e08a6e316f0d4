//! Experiment sweeps: generate, transform, extract, clean, split, scale,
//! train and evaluate per condition, then render the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{apply_scaler, clean, fit_scaler, stratified_split, DatasetError, SplitSpec};
use crate::defense::{ChannelTransform, DefenseError};
use crate::emulator::{
    generate_dataset, EmulatorError, GridCell, LinkParams, MovementClass, MovementProgram, RobotProfile,
    TlsChannelModel,
};
use crate::features::{build_matrix, canonical_class_order, FeatureMatrix, COLUMNS, UNKNOWN};
use crate::nn::{argmax, evaluate, train, vote, EvalReport, MlpModel, NnError, TrainParams};
use crate::seed;
use crate::trace::FlowTrace;
use crate::workflow::{
    builtin_templates, generate_workflow_set, mean_recovery, reconstruct, recovery_rate, Recovery, WorkflowError,
    WorkflowParams, WorkflowTemplate,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("condition {cell}: emulation: {source}")]
    Emulate { cell: String, source: EmulatorError },
    #[error("condition {cell}: transform: {source}")]
    Transform { cell: String, source: DefenseError },
    #[error("condition {cell}: dataset: {source}")]
    Dataset { cell: String, source: DatasetError },
    #[error("condition {cell}: model: {source}")]
    Model { cell: String, source: NnError },
    #[error("open-world unknowns must be in 0..=6, got {0}")]
    Unknowns(usize),
    #[error("report has no cells")]
    EmptyReport,
    #[error("unknown report format {0:?}; expected csv, md or svg")]
    Format(String),
    #[error("workflow: {0}")]
    Workflow(#[from] WorkflowError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn default_distance() -> f64 {
    1.0
}

fn default_speed() -> u32 {
    25_000
}

fn default_repetitions() -> u32 {
    3
}

fn default_interval() -> f64 {
    1.0
}

/// One grid cell: robot parameters shared by every class plus a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_distance")]
    pub distance_mm: f64,
    #[serde(default = "default_speed")]
    pub speed_code: u32,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_interval")]
    pub command_interval_s: f64,
    #[serde(default)]
    pub interval_jitter_s: f64,
    #[serde(default)]
    pub link: LinkParams,
}

impl Default for Condition {
    fn default() -> Self {
        Condition {
            label: None,
            distance_mm: default_distance(),
            speed_code: default_speed(),
            repetitions: default_repetitions(),
            command_interval_s: default_interval(),
            interval_jitter_s: 0.0,
            link: LinkParams::default(),
        }
    }
}

impl Condition {
    pub fn with_link(link: LinkParams) -> Self {
        Condition { link, ..Self::default() }
    }

    pub fn name(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        format!(
            "D={} S={} delay={}ms loss={}%",
            self.distance_mm, self.speed_code, self.link.delay_ms, self.link.loss_pct
        )
    }

    pub fn program(&self, movement: MovementClass) -> MovementProgram {
        MovementProgram {
            command_interval_s: self.command_interval_s,
            interval_jitter_s: self.interval_jitter_s,
            ..MovementProgram::new(movement, self.distance_mm, self.speed_code, self.repetitions)
        }
    }
}

fn default_conditions() -> Vec<Condition> {
    vec![Condition::default()]
}

fn default_samples() -> usize {
    500
}

fn default_classes() -> Vec<MovementClass> {
    MovementClass::ALL.to_vec()
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<Condition>,
    /// Flows per class per condition.
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<MovementClass>,
    #[serde(default)]
    pub transform: ChannelTransform,
    #[serde(default)]
    pub open_world_unknowns: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training: TrainParams,
    #[serde(default)]
    pub split: SplitSpec,
    /// Shuffles per feature for permutation importance; 0 skips it.
    #[serde(default)]
    pub importance_repeats: usize,
    /// One model over all conditions instead of one per condition.
    #[serde(default)]
    pub pooled: bool,
    #[serde(default)]
    pub tls: TlsChannelModel,
    #[serde(default)]
    pub robot: RobotProfile,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: default_name(),
            conditions: default_conditions(),
            samples_per_class: default_samples(),
            classes: default_classes(),
            transform: ChannelTransform::None,
            open_world_unknowns: 0,
            seed: 0,
            training: TrainParams::default(),
            split: SplitSpec::default(),
            importance_repeats: 0,
            pooled: false,
            tls: TlsChannelModel::default(),
            robot: RobotProfile::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.conditions.is_empty() {
            return Err(ExperimentError::Spec("conditions must be non-empty".into()));
        }
        if self.classes.is_empty() {
            return Err(ExperimentError::Spec("classes must be non-empty".into()));
        }
        if self.samples_per_class == 0 {
            return Err(ExperimentError::Spec("samples_per_class must be positive".into()));
        }
        if self.open_world_unknowns > 6 {
            return Err(ExperimentError::Unknowns(self.open_world_unknowns));
        }
        self.transform.validate().map_err(|e| ExperimentError::Spec(e.to_string()))?;
        for c in &self.conditions {
            for &m in &self.classes {
                c.program(m).validate().map_err(|e| ExperimentError::Spec(format!("{}: {e}", c.name())))?;
            }
            c.link.validate().map_err(|e| ExperimentError::Spec(format!("{}: {e}", c.name())))?;
        }
        Ok(())
    }

    fn train_params(&self) -> TrainParams {
        TrainParams { seed: seed::derive(self.seed, "train", &[]), ..self.training.clone() }
    }

    fn split_spec(&self) -> SplitSpec {
        SplitSpec { seed: seed::derive(self.seed, "split", &[]), ..self.split.clone() }
    }
}

/// Relabel the last `unknowns` movement classes (declaration order) as
/// Unknown. Labels outside the movement vocabulary are kept.
pub fn open_world_relabel(matrix: &FeatureMatrix, unknowns: usize) -> Result<FeatureMatrix, ExperimentError> {
    if unknowns > 6 {
        return Err(ExperimentError::Unknowns(unknowns));
    }
    if unknowns == 0 {
        return Ok(matrix.clone());
    }
    let known = MovementClass::ALL.len() - unknowns;
    let mapped = |name: &str| -> String {
        match MovementClass::ALL.iter().position(|c| c.name() == name) {
            Some(i) if i >= known => UNKNOWN.to_string(),
            _ => name.to_string(),
        }
    };
    let mut names: Vec<String> = MovementClass::ALL[..known].iter().map(|c| c.name().to_string()).collect();
    names.push(UNKNOWN.to_string());
    for c in &matrix.class_names {
        let m = mapped(c);
        if !names.contains(&m) {
            names.push(m);
        }
    }
    let names = canonical_class_order(names.iter().map(String::as_str));
    let map: Vec<usize> = matrix
        .class_names
        .iter()
        .map(|c| names.iter().position(|n| *n == mapped(c)).expect("vocabulary covers every mapped label"))
        .collect();
    Ok(matrix.relabel(names, &map))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
}

fn row_accuracy(model: &MlpModel, m: &FeatureMatrix, map: &[usize]) -> Result<f64, NnError> {
    let pred = model.predict(m)?;
    let hits = pred.iter().zip(m.label_indices()).filter(|(p, &l)| **p == map[l]).count();
    Ok(hits as f64 / m.n_rows().max(1) as f64)
}

/// Mean drop in per-row accuracy when one column is shuffled across rows.
/// Every name in `all_columns` is reported; columns the model does not use
/// score exactly 0.
pub fn permutation_importance(
    model: &MlpModel,
    test: &FeatureMatrix,
    repeats: usize,
    seed_value: u64,
    all_columns: &[String],
) -> Result<Vec<FeatureImportance>, NnError> {
    let map = model.label_map(test)?;
    let base = row_accuracy(model, test, &map)?;
    let mut out = Vec::with_capacity(all_columns.len());
    for name in all_columns {
        let Some(j) = test.column_index(name) else {
            out.push(FeatureImportance { feature: name.clone(), importance: 0.0 });
            continue;
        };
        let original = test.column(j);
        let mut shuffled = test.clone();
        let mut total = 0.0;
        for r in 0..repeats {
            let mut col = original.clone();
            col.shuffle(&mut seed::rng(seed_value, "importance", &[j as u64, r as u64]));
            shuffled.set_column(j, &col);
            total += base - row_accuracy(model, &shuffled, &map)?;
        }
        out.push(FeatureImportance { feature: name.clone(), importance: total / repeats.max(1) as f64 });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub condition: Condition,
    pub n_flows: usize,
    pub n_rows: usize,
    pub dropped_columns: Vec<String>,
    pub hidden_size: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub eval: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<FeatureImportance>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub transform: String,
    pub open_world_unknowns: usize,
    pub cells: Vec<CellReport>,
}

/// Everything a run produced, for callers that need the models.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: SweepReport,
    /// One per condition, or a single pooled model.
    pub models: Vec<MlpModel>,
}

/// Emulate and transform every class under one condition.
pub fn condition_flows(spec: &ExperimentSpec, cond: &Condition) -> Result<Vec<FlowTrace>, ExperimentError> {
    let cell = cond.name();
    let grid: Vec<GridCell> =
        spec.classes.iter().map(|&m| GridCell { program: cond.program(m), link: cond.link.clone() }).collect();
    let flows = generate_dataset(&grid, spec.samples_per_class, spec.seed, &spec.tls, &spec.robot)
        .map_err(|source| ExperimentError::Emulate { cell: cell.clone(), source })?;
    flows
        .iter()
        .map(|f| spec.transform.apply(f))
        .collect::<Result<_, _>>()
        .map_err(|source| ExperimentError::Transform { cell, source })
}

/// Feature matrix for one condition, open-world relabelling applied.
pub fn condition_matrix(spec: &ExperimentSpec, cond: &Condition) -> Result<FeatureMatrix, ExperimentError> {
    open_world_relabel(&build_matrix(&condition_flows(spec, cond)?), spec.open_world_unknowns)
}

struct Trained {
    model: MlpModel,
    test: FeatureMatrix,
    dropped: Vec<String>,
    epochs_run: usize,
    best_epoch: usize,
}

fn fit(spec: &ExperimentSpec, matrix: &FeatureMatrix, cell: &str) -> Result<Trained, ExperimentError> {
    let ds = |source| ExperimentError::Dataset { cell: cell.to_string(), source };
    let nn = |source| ExperimentError::Model { cell: cell.to_string(), source };
    let (cleaned, report) = clean(matrix).map_err(ds)?;
    let split = stratified_split(&cleaned, &spec.split_spec()).map_err(ds)?;
    let scaler = fit_scaler(&split.train).map_err(ds)?;
    let train_m = apply_scaler(&scaler, &split.train).map_err(ds)?;
    let val_m = apply_scaler(&scaler, &split.validation).map_err(ds)?;
    let test = apply_scaler(&scaler, &split.test).map_err(ds)?;
    let (mut model, curve) = train(&spec.train_params(), &train_m, &val_m).map_err(nn)?;
    model.scaler = Some(scaler);
    Ok(Trained {
        model,
        test,
        dropped: report.dropped_columns,
        epochs_run: curve.epochs.len(),
        best_epoch: curve.best_epoch,
    })
}

fn cell_report(
    spec: &ExperimentSpec,
    cond: &Condition,
    t: &Trained,
    test: &FeatureMatrix,
    n_rows: usize,
) -> Result<CellReport, ExperimentError> {
    let cell = cond.name();
    let nn = |source| ExperimentError::Model { cell: cell.clone(), source };
    let eval = evaluate(&t.model, test).map_err(nn)?;
    let importance = if spec.importance_repeats > 0 {
        let all: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
        let seed_value = seed::derive(spec.seed, "importance", &[]);
        Some(permutation_importance(&t.model, test, spec.importance_repeats, seed_value, &all).map_err(nn)?)
    } else {
        None
    };
    Ok(CellReport {
        label: cell.clone(),
        condition: cond.clone(),
        n_flows: spec.classes.len() * spec.samples_per_class,
        n_rows,
        dropped_columns: t.dropped.clone(),
        hidden_size: t.model.config.hidden_size,
        epochs_run: t.epochs_run,
        best_epoch: t.best_epoch,
        eval,
        importance,
    })
}

/// Run every condition. Flows are generated from the same master seed in
/// every condition, so conditions differ only in their parameters.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentRun, ExperimentError> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut models = Vec::new();
    if spec.pooled {
        let mut pooled: Option<FeatureMatrix> = None;
        let mut rows = Vec::new();
        for (c, cond) in spec.conditions.iter().enumerate() {
            let mut m = condition_matrix(spec, cond)?;
            m.flow_ids_mut().iter_mut().for_each(|id| *id = format!("k{c:02}-{id}"));
            rows.push(m.n_rows());
            match pooled.as_mut() {
                Some(p) => p.extend(&m),
                None => pooled = Some(m),
            }
        }
        let pooled = pooled.expect("conditions are non-empty");
        let t = fit(spec, &pooled, "pooled")?;
        for (c, cond) in spec.conditions.iter().enumerate() {
            let prefix = format!("k{c:02}-");
            let idx: Vec<usize> = (0..t.test.n_rows()).filter(|&i| t.test.flow_id(i).starts_with(&prefix)).collect();
            let test = t.test.select_rows(&idx);
            cells.push(cell_report(spec, cond, &t, &test, rows[c])?);
        }
        models.push(t.model);
    } else {
        for cond in &spec.conditions {
            let m = condition_matrix(spec, cond)?;
            let t = fit(spec, &m, &cond.name())?;
            cells.push(cell_report(spec, cond, &t, &t.test, m.n_rows())?);
            models.push(t.model);
        }
    }
    let report = SweepReport {
        name: spec.name.clone(),
        transform: spec.transform.name().to_string(),
        open_world_unknowns: spec.open_world_unknowns,
        cells,
    };
    Ok(ExperimentRun { report, models })
}

/// Vote a class for each flow with a trained model. Flows without feature
/// rows get `None`.
pub fn classify_flows(model: &MlpModel, flows: &[FlowTrace]) -> Result<Vec<Option<String>>, NnError> {
    let raw = build_matrix(flows);
    let mut m = raw
        .select_columns(&model.columns)
        .map_err(|_| NnError::Columns { expected: model.columns.clone(), found: raw.column_names.clone() })?;
    if let Some(s) = &model.scaler {
        for i in 0..m.n_rows() {
            s.scale_row(m.row_mut(i));
        }
    }
    let probs = model.predict_proba(&m)?;
    let mut by_flow: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, p) in probs.into_iter().enumerate() {
        by_flow.entry(m.flow_id(i)).or_default().push(p);
    }
    flows
        .iter()
        .map(|f| match by_flow.get(f.flow_id.as_str()) {
            Some(ps) => vote(ps).map(|k| Some(model.class_names[k].clone())),
            None => Ok(None),
        })
        .collect()
}

/// Class index per row of an already scaled matrix.
pub fn predict_rows(model: &MlpModel, m: &FeatureMatrix) -> Result<Vec<usize>, NnError> {
    Ok(model.predict_proba(m)?.iter().map(|p| argmax(p)).collect())
}

fn default_workflow_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    /// Trains the movement classifier; its transform also applies to the
    /// workflow flows.
    #[serde(default)]
    pub classifier: ExperimentSpec,
    #[serde(default)]
    pub workflow: WorkflowParams,
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default = "default_workflow_samples")]
    pub samples_per_workflow: usize,
    /// Built-in templates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<WorkflowTemplate>>,
    /// Feed true movement labels instead of classifier output.
    #[serde(default)]
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub oracle: bool,
    pub recovery: BTreeMap<String, Recovery>,
    pub mean_recovery: f64,
    pub ambiguous: usize,
    /// Fraction of workflow movements the classifier labelled correctly.
    pub movement_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<SweepReport>,
}

/// Train (unless in oracle mode), emulate workflows, classify each movement
/// flow and match the sequence against the templates.
pub fn run_workflow_experiment(spec: &WorkflowSpec) -> Result<WorkflowReport, ExperimentError> {
    if spec.oracle {
        return reconstruct_workflows(spec, None, None);
    }
    let cspec = &spec.classifier;
    let pooled = ExperimentSpec { pooled: cspec.conditions.len() > 1 || cspec.pooled, ..cspec.clone() };
    let run = run_experiment(&pooled)?;
    let model = run.models.into_iter().next().ok_or(ExperimentError::EmptyReport)?;
    reconstruct_workflows(spec, Some(&model), Some(run.report))
}

/// Emulate workflows and reconstruct them with `model`, or with the true
/// labels when it is absent. The classifier spec's transform, TLS model,
/// robot and seed still apply.
pub fn reconstruct_workflows(
    spec: &WorkflowSpec,
    model: Option<&MlpModel>,
    classifier: Option<SweepReport>,
) -> Result<WorkflowReport, ExperimentError> {
    let templates = spec.templates.clone().unwrap_or_else(builtin_templates);
    if spec.samples_per_workflow == 0 {
        return Err(ExperimentError::Spec("samples_per_workflow must be positive".into()));
    }
    let cspec = &spec.classifier;
    let samples = generate_workflow_set(
        &templates,
        spec.samples_per_workflow,
        &spec.workflow,
        &spec.link,
        &cspec.tls,
        &cspec.robot,
        seed::derive(cspec.seed, "workflows", &[]),
    )?;

    let mut results = Vec::with_capacity(samples.len());
    let (mut hits, mut total) = (0usize, 0usize);
    for s in &samples {
        let labels: Vec<Option<MovementClass>> = match model {
            None => s.movements.iter().copied().map(Some).collect(),
            Some(model) => {
                let flows: Vec<FlowTrace> = s
                    .flows
                    .iter()
                    .map(|f| cspec.transform.apply(f))
                    .collect::<Result<_, _>>()
                    .map_err(|source| ExperimentError::Transform { cell: s.workflow.clone(), source })?;
                let names = classify_flows(model, &flows)
                    .map_err(|source| ExperimentError::Model { cell: s.workflow.clone(), source })?;
                names.iter().map(|l| l.as_deref().and_then(|n| MovementClass::from_str(n).ok())).collect()
            }
        };
        total += s.movements.len();
        hits += s.movements.iter().zip(&labels).filter(|(a, b)| Some(**a) == **b).count();
        // Unknown or missing labels drop out of the sequence.
        let classified: Vec<MovementClass> = labels.into_iter().flatten().collect();
        let r = if classified.is_empty() {
            // Nothing recognised: count as a miss.
            crate::workflow::ReconstructionResult {
                workflow: String::new(),
                distance: usize::MAX,
                runner_up: None,
                ambiguous: false,
            }
        } else {
            reconstruct(&classified, &templates)?
        };
        results.push((r, s.workflow.clone()));
    }
    let recovery = recovery_rate(&results)?;
    Ok(WorkflowReport {
        oracle: model.is_none(),
        mean_recovery: mean_recovery(&recovery),
        ambiguous: results.iter().filter(|(r, _)| r.ambiguous).count(),
        movement_accuracy: hits as f64 / total.max(1) as f64,
        recovery,
        classifier,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(ExperimentError::Format(s.to_string())),
        }
    }
}

/// Class rows across all cells, first cell's order first.
fn class_rows(report: &SweepReport) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for c in &report.cells {
        for n in &c.eval.class_names {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    names
}

fn pr(cell: &CellReport, flow_level: bool, class: &str) -> Option<(f64, f64)> {
    let k = cell.eval.class_names.iter().position(|n| n == class)?;
    let m = if flow_level { &cell.eval.per_flow } else { &cell.eval.per_row };
    Some((m.precision[k], m.recall[k]))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(report: &SweepReport) -> String {
    let mut out = String::from("level,class");
    for c in &report.cells {
        let l = csv_field(&format!("{} P", c.label));
        let r = csv_field(&format!("{} R", c.label));
        let _ = write!(out, ",{l},{r}");
    }
    out.push('\n');
    for (level, flow) in [("packet", false), ("flow", true)] {
        for class in class_rows(report) {
            let _ = write!(out, "{level},{}", csv_field(&class));
            for c in &report.cells {
                match pr(c, flow, &class) {
                    Some((p, r)) => {
                        let _ = write!(out, ",{p:.4},{r:.4}");
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        for (name, pick) in [("accuracy", 0), ("macro_accuracy", 1)] {
            let _ = write!(out, "{level},{name}");
            for c in &report.cells {
                let m = if flow { &c.eval.per_flow } else { &c.eval.per_row };
                let v = if pick == 0 { m.accuracy } else { m.macro_accuracy };
                let _ = write!(out, ",{v:.4},{v:.4}");
            }
            out.push('\n');
        }
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.0}%", v * 100.0)
}

fn render_markdown(report: &SweepReport) -> String {
    let mut out = format!("# {}\n\nTransform: {}", report.name, report.transform);
    if report.open_world_unknowns > 0 {
        let _ = write!(out, "; unknown classes: {}", report.open_world_unknowns);
    }
    out.push_str("\n\n");
    for (title, flow) in [("Per packet", false), ("Per flow (majority vote)", true)] {
        let _ = writeln!(out, "## {title}\n");
        out.push_str("| Movement |");
        for c in &report.cells {
            let _ = write!(out, " {} P | {} R |", c.label, c.label);
        }
        out.push_str("\n|---|");
        for _ in &report.cells {
            out.push_str("---:|---:|");
        }
        out.push('\n');
        for class in class_rows(report) {
            let _ = write!(out, "| {class} |");
            for c in &report.cells {
                match pr(c, flow, &class) {
                    Some((p, r)) => {
                        let _ = write!(out, " {} | {} |", pct(p), pct(r));
                    }
                    None => out.push_str(" | |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("## Summary\n\n| Condition | Packet acc. | Flow acc. | Flow macro acc. | Rows | Hidden | Epochs |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for c in &report.cells {
        let _ = writeln!(
            out,
            "| {} | {:.3} | {:.3} | {:.3} | {} | {} | {} |",
            c.label,
            c.eval.per_row.accuracy,
            c.eval.per_flow.accuracy,
            c.eval.per_flow.macro_accuracy,
            c.n_rows,
            c.hidden_size,
            c.epochs_run
        );
    }
    out
}

/// Horizontal bar chart of permutation importances, one panel per cell.
fn render_svg(report: &SweepReport) -> String {
    let bar_h = 14.0;
    let label_w = 160.0;
    let plot_w = 300.0;
    let panels: Vec<&CellReport> = report.cells.iter().filter(|c| c.importance.is_some()).collect();
    let rows_per_panel = COLUMNS.len() as f64 + 2.0;
    let height = (panels.len().max(1) as f64) * rows_per_panel * bar_h + 20.0;
    let width = label_w + plot_w + 80.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let mut y = 14.0;
    for cell in panels {
        let imp = cell.importance.as_ref().expect("filtered");
        let max = imp.iter().map(|f| f.importance.abs()).fold(1e-9, f64::max);
        let _ = writeln!(out, "<text x=\"4\" y=\"{y}\" font-weight=\"bold\">{}</text>", xml_escape(&cell.label));
        y += bar_h;
        for f in imp {
            let w = f.importance.abs() / max * plot_w;
            let colour = if f.importance >= 0.0 { "#4c72b0" } else { "#c44e52" };
            let _ = writeln!(out, "<text x=\"4\" y=\"{}\">{}</text>", y + 10.0, xml_escape(&f.feature));
            let _ = writeln!(
                out,
                "<rect x=\"{label_w}\" y=\"{}\" width=\"{w:.1}\" height=\"{}\" fill=\"{colour}\"/>",
                y + 2.0,
                bar_h - 3.0
            );
            let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\">{:.3}</text>", label_w + w + 4.0, y + 10.0, f.importance);
            y += bar_h;
        }
        y += bar_h;
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_report(report: &SweepReport, format: ReportFormat) -> Result<String, ExperimentError> {
    if report.cells.is_empty() {
        return Err(ExperimentError::EmptyReport);
    }
    Ok(match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Svg => render_svg(report),
    })
}

/// Importances as a long table: condition, feature, importance.
pub fn render_importance_csv(report: &SweepReport) -> String {
    let mut out = String::from("condition,feature,importance\n");
    for c in &report.cells {
        for f in c.importance.iter().flatten() {
            let _ = writeln!(out, "{},{},{:.6}", csv_field(&c.label), f.feature, f.importance);
        }
    }
    out
}

/// Write `contents` next to `path` and rename it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

/// Write report.csv, report.md and, when importances exist, importance.csv
/// plus an SVG chart if asked. Returns the written paths.
pub fn write_report_dir(report: &SweepReport, dir: &Path, svg: bool) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), ExperimentError> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put("report.csv", render_report(report, ReportFormat::Csv)?)?;
    put("report.md", render_report(report, ReportFormat::Markdown)?)?;
    if report.cells.iter().any(|c| c.importance.is_some()) {
        put("importance.csv", render_importance_csv(report))?;
        if svg {
            put("importance.svg", render_report(report, ReportFormat::Svg)?)?;
        }
    }
    Ok(written)
}
