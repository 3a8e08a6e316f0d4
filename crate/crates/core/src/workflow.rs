//! Warehouse workflow templates and their reconstruction from classified
//! movement sequences by edit distance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::{
    emulate_session, move_target, EmulatorError, LinkParams, MovementClass, MovementProgram, RobotProfile,
    TlsChannelModel, DISTANCE_GRID_MM, SPEED_GRID,
};
use crate::seed;
use crate::trace::FlowTrace;

use MovementClass::{X, XY, Y, Z};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("cannot reconstruct an empty movement sequence")]
    EmptySequence,
    #[error("no templates to match against")]
    NoTemplates,
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error("recovery rate needs at least one result")]
    NoResults,
    #[error("workflow generation: {0}")]
    Params(String),
    #[error(transparent)]
    Emulator(#[from] EmulatorError),
    #[error("reading templates from {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowTemplate {
    pub name: String,
    /// Canonical movement sequences, any of which realises the workflow.
    pub sequences: Vec<Vec<MovementClass>>,
    /// Inclusive bounds on the number of position changes.
    pub position_changes: (usize, usize),
}

impl WorkflowTemplate {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let fail = |message: String| Err(WorkflowError::Template { name: self.name.clone(), message });
        let (lo, hi) = self.position_changes;
        if self.name.is_empty() {
            return fail("name is empty".into());
        }
        if self.sequences.is_empty() {
            return fail("no sequences".into());
        }
        if lo == 0 || lo > hi {
            return fail(format!("bad position-change range {lo}..={hi}"));
        }
        for s in &self.sequences {
            if !(lo..=hi).contains(&s.len()) {
                return fail(format!("sequence of length {} outside {lo}..={hi}", s.len()));
            }
        }
        Ok(())
    }
}

fn template(name: &str, sequences: Vec<Vec<MovementClass>>, range: (usize, usize)) -> WorkflowTemplate {
    WorkflowTemplate { name: name.into(), sequences, position_changes: range }
}

/// Push, Pull, PickAndPlace and Packing, in that declaration order.
pub fn builtin_templates() -> Vec<WorkflowTemplate> {
    let pick = vec![XY, Z, Z, XY, Z, Z, XY];
    let pack = vec![XY, Z, XY, Z, XY, Z];
    let with = |base: &[MovementClass], head: &[MovementClass], tail: &[MovementClass]| -> Vec<MovementClass> {
        head.iter().chain(base).chain(tail).copied().collect()
    };
    vec![
        template("Push", vec![vec![XY, X], vec![XY, X, Z]], (2, 3)),
        template("Pull", vec![vec![XY, Y], vec![XY, Y, Z]], (2, 3)),
        template(
            "PickAndPlace",
            vec![pick.clone(), with(&pick, &[XY], &[]), with(&pick, &[], &[XY]), with(&pick, &[XY], &[XY])],
            (7, 9),
        ),
        template(
            "Packing",
            vec![pack.clone(), with(&pack, &[], &[XY]), with(&pack, &[], &[XY, Z]), with(&pack, &[], &[XY, Z, XY])],
            (6, 9),
        ),
    ]
}

/// Read a JSON array of templates and validate each.
pub fn load_templates(path: &Path) -> Result<Vec<WorkflowTemplate>, WorkflowError> {
    let load = |message: String| WorkflowError::Load { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let templates: Vec<WorkflowTemplate> =
        serde_path_to_error::deserialize(de).map_err(|e| load(format!("at `{}`: {}", e.path(), e.inner())))?;
    if templates.is_empty() {
        return Err(WorkflowError::NoTemplates);
    }
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub workflow: String,
    pub distance: usize,
    /// Best distance among the other templates; absent with a single template.
    pub runner_up: Option<usize>,
    pub ambiguous: bool,
}

/// Match a classified movement sequence to the nearest template. Ties go to
/// the template whose nearest sequence is shorter, then to declaration order.
pub fn reconstruct(
    classified: &[MovementClass],
    templates: &[WorkflowTemplate],
) -> Result<ReconstructionResult, WorkflowError> {
    if classified.is_empty() {
        return Err(WorkflowError::EmptySequence);
    }
    if templates.is_empty() {
        return Err(WorkflowError::NoTemplates);
    }
    // (distance, length of the nearest sequence) per template.
    let scores: Vec<(usize, usize)> = templates
        .iter()
        .map(|t| {
            t.sequences
                .iter()
                .map(|s| (edit_distance(classified, s), s.len()))
                .min()
                .expect("validated templates have sequences")
        })
        .collect();
    let best = (0..templates.len()).min_by_key(|&i| (scores[i], i)).expect("non-empty");
    let distance = scores[best].0;
    let runner_up = (0..templates.len()).filter(|&i| i != best).map(|i| scores[i].0).min();
    Ok(ReconstructionResult {
        workflow: templates[best].name.clone(),
        distance,
        runner_up,
        ambiguous: runner_up == Some(distance),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub correct: usize,
    pub total: usize,
    pub rate: f64,
}

/// Fraction of correct reconstructions per true workflow. Workflows with no
/// samples do not appear.
pub fn recovery_rate(results: &[(ReconstructionResult, String)]) -> Result<BTreeMap<String, Recovery>, WorkflowError> {
    if results.is_empty() {
        return Err(WorkflowError::NoResults);
    }
    let mut out: BTreeMap<String, Recovery> = BTreeMap::new();
    for (r, truth) in results {
        let e = out.entry(truth.clone()).or_insert(Recovery { correct: 0, total: 0, rate: 0.0 });
        e.total += 1;
        e.correct += usize::from(&r.workflow == truth);
    }
    for e in out.values_mut() {
        e.rate = e.correct as f64 / e.total as f64;
    }
    Ok(out)
}

/// Mean of the per-workflow rates.
pub fn mean_recovery(rates: &BTreeMap<String, Recovery>) -> f64 {
    rates.values().map(|r| r.rate).sum::<f64>() / rates.len().max(1) as f64
}

/// How workflow movements are parameterised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowParams {
    #[serde(default = "default_distances")]
    pub distance_grid_mm: Vec<f64>,
    #[serde(default = "default_speeds")]
    pub speed_grid: Vec<u32>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_interval")]
    pub command_interval_s: f64,
}

fn default_distances() -> Vec<f64> {
    DISTANCE_GRID_MM.to_vec()
}

fn default_speeds() -> Vec<u32> {
    SPEED_GRID.to_vec()
}

fn default_repetitions() -> u32 {
    1
}

fn default_interval() -> f64 {
    1.0
}

impl Default for WorkflowParams {
    fn default() -> Self {
        WorkflowParams {
            distance_grid_mm: default_distances(),
            speed_grid: default_speeds(),
            repetitions: default_repetitions(),
            command_interval_s: default_interval(),
        }
    }
}

impl WorkflowParams {
    /// Every movement at one distance and speed.
    pub fn fixed(distance_mm: f64, speed_code: u32) -> Self {
        WorkflowParams { distance_grid_mm: vec![distance_mm], speed_grid: vec![speed_code], ..Self::default() }
    }
}

/// One emulated workflow execution.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSample {
    pub workflow: String,
    pub movements: Vec<MovementClass>,
    /// One flow per movement, labelled with its true class.
    pub flows: Vec<FlowTrace>,
}

/// Emulate one execution of `template`: pick one of its sequences, then run
/// each movement as its own session starting where the previous one ended,
/// with distance and speed drawn from the grids.
pub fn generate_workflow_trace(
    template: &WorkflowTemplate,
    params: &WorkflowParams,
    link: &LinkParams,
    tls: &TlsChannelModel,
    robot: &RobotProfile,
    seed_value: u64,
) -> Result<WorkflowSample, WorkflowError> {
    template.validate()?;
    if params.distance_grid_mm.is_empty() || params.speed_grid.is_empty() {
        return Err(WorkflowError::Params("distance and speed grids must be non-empty".into()));
    }
    let mut rng = seed::rng(seed_value, "workflow", &[]);
    let movements = template.sequences.choose(&mut rng).expect("validated").clone();
    let mut position = robot.home_mm;
    let mut flows = Vec::with_capacity(movements.len());
    for (k, &m) in movements.iter().enumerate() {
        let distance = params.distance_grid_mm[rng.gen_range(0..params.distance_grid_mm.len())];
        let speed = params.speed_grid[rng.gen_range(0..params.speed_grid.len())];
        let program = MovementProgram {
            start_mm: Some(position),
            command_interval_s: params.command_interval_s,
            ..MovementProgram::new(m, distance, speed, params.repetitions)
        };
        for _ in 0..params.repetitions {
            position = move_target(m, distance, position);
        }
        let link = LinkParams { seed: seed::derive(seed_value, "workflow-move", &[k as u64]), ..link.clone() };
        let mut flow = emulate_session(&program, &link, tls, robot)?;
        flow.flow_id = format!("{}-m{k:02}", template.name);
        flows.push(flow);
    }
    Ok(WorkflowSample { workflow: template.name.clone(), movements, flows })
}

/// `samples` executions of every template, seeded per (template, sample).
pub fn generate_workflow_set(
    templates: &[WorkflowTemplate],
    samples: usize,
    params: &WorkflowParams,
    link: &LinkParams,
    tls: &TlsChannelModel,
    robot: &RobotProfile,
    master: u64,
) -> Result<Vec<WorkflowSample>, WorkflowError> {
    if templates.is_empty() {
        return Err(WorkflowError::NoTemplates);
    }
    let mut out = Vec::with_capacity(templates.len() * samples);
    for (t, template) in templates.iter().enumerate() {
        for s in 0..samples {
            let seed_value = seed::derive(master, "workflow-sample", &[t as u64, s as u64]);
            let mut sample = generate_workflow_trace(template, params, link, tls, robot, seed_value)?;
            for flow in &mut sample.flows {
                flow.flow_id = format!("w{t:02}-s{s:04}-{}", flow.flow_id);
            }
            out.push(sample);
        }
    }
    Ok(out)
}
