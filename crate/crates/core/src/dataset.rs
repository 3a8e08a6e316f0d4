//! Cleaning, scaling, splitting and weighting of feature matrices.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("no informative features: every column is constant")]
    NoInformativeFeatures,
    #[error("cannot fit a scaler on an empty matrix")]
    EmptyTrain,
    #[error("class {class} has {rows} rows; at least {min} are needed to split")]
    ClassTooSmall { class: String, rows: usize, min: usize },
    #[error("invalid split fractions: test {test}, validation {validation}")]
    Fractions { test: f64, validation: f64 },
    #[error("column mismatch: scaler fitted on {expected:?}, matrix has {found:?}")]
    Columns { expected: Vec<String>, found: Vec<String> },
}

pub const MIN_ROWS_PER_CLASS: usize = 5;

/// What [`clean`] removed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub dropped_columns: Vec<String>,
    pub dropped_rows: usize,
}

/// Drop rows with non-finite values, then columns that are constant over the
/// remaining rows.
pub fn clean(matrix: &FeatureMatrix) -> Result<(FeatureMatrix, CleanReport), DatasetError> {
    let keep_rows: Vec<usize> = (0..matrix.n_rows()).filter(|&i| matrix.row(i).iter().all(|v| v.is_finite())).collect();
    let dropped_rows = matrix.n_rows() - keep_rows.len();
    let rows = matrix.select_rows(&keep_rows);

    let mut keep_cols = Vec::new();
    let mut dropped_columns = Vec::new();
    for (j, name) in rows.column_names.iter().enumerate() {
        let first = if rows.is_empty() { 0.0 } else { rows.row(0)[j] };
        let constant = (0..rows.n_rows()).all(|i| rows.row(i)[j] == first);
        if constant {
            dropped_columns.push(name.clone());
        } else {
            keep_cols.push(name.clone());
        }
    }
    if keep_cols.is_empty() {
        return Err(DatasetError::NoInformativeFeatures);
    }
    let cleaned = rows.select_columns(&keep_cols).expect("columns come from the matrix");
    Ok((cleaned, CleanReport { dropped_columns, dropped_rows }))
}

/// Per-column minimum and maximum learned from training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub columns: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_scaler(train: &FeatureMatrix) -> Result<ScalerParams, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let n = train.n_cols();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for i in 0..train.n_rows() {
        for (j, &v) in train.row(i).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(ScalerParams { columns: train.column_names.clone(), min, max })
}

impl ScalerParams {
    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span > 0.0 {
            (v - self.min[j]) / span
        } else {
            0.0
        }
    }

    pub fn scale_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = self.scale_value(j, *v);
        }
    }
}

/// Min-max scale `matrix` with `params`. Rows outside the training range land
/// outside [0, 1].
pub fn apply_scaler(params: &ScalerParams, matrix: &FeatureMatrix) -> Result<FeatureMatrix, DatasetError> {
    if params.columns != matrix.column_names {
        return Err(DatasetError::Columns { expected: params.columns.clone(), found: matrix.column_names.clone() });
    }
    let mut out = matrix.clone();
    for i in 0..out.n_rows() {
        params.scale_row(out.row_mut(i));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: f64,
    /// Share of all rows, taken from the training side: 0.2 and 0.2 give 60/20/20.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction: 0.2, validation_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: FeatureMatrix,
    pub validation: FeatureMatrix,
    pub test: FeatureMatrix,
}

/// Row indices of each partition, in original row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Assign whole flows to partitions, per class. Within a class, flows are
/// shuffled and walked in order; a flow goes to the partition whose row
/// budget its first row falls in, so row counts stay within one flow of the
/// target proportions.
pub fn split_indices(matrix: &FeatureMatrix, spec: &SplitSpec) -> Result<SplitIndices, DatasetError> {
    let ok = |f: f64| f.is_finite() && f > 0.0 && f < 1.0;
    if !ok(spec.test_fraction) || !ok(spec.validation_fraction) || spec.test_fraction + spec.validation_fraction >= 1.0
    {
        return Err(DatasetError::Fractions { test: spec.test_fraction, validation: spec.validation_fraction });
    }

    // Flows per class, in first-appearance order.
    let mut by_class: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (_, rows) in matrix.flow_groups() {
        let class = matrix.label_indices()[rows[0]];
        by_class.entry(class).or_default().push(rows);
    }

    let mut out = SplitIndices { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for (class, mut flows) in by_class {
        let total: usize = flows.iter().map(Vec::len).sum();
        if total < MIN_ROWS_PER_CLASS {
            return Err(DatasetError::ClassTooSmall {
                class: matrix.class_names[class].clone(),
                rows: total,
                min: MIN_ROWS_PER_CLASS,
            });
        }
        flows.shuffle(&mut seed::rng(spec.seed, "split", &[class as u64]));
        let test_rows = (total as f64 * spec.test_fraction).round() as usize;
        let val_rows = (total as f64 * spec.validation_fraction).round() as usize;
        let mut seen = 0;
        for rows in flows {
            let target = if seen < test_rows {
                &mut out.test
            } else if seen < test_rows + val_rows {
                &mut out.validation
            } else {
                &mut out.train
            };
            seen += rows.len();
            target.extend(rows);
        }
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn stratified_split(matrix: &FeatureMatrix, spec: &SplitSpec) -> Result<Split, DatasetError> {
    let idx = split_indices(matrix, spec)?;
    Ok(Split {
        train: matrix.select_rows(&idx.train),
        validation: matrix.select_rows(&idx.validation),
        test: matrix.select_rows(&idx.test),
    })
}

/// Per-class loss weights, indexed like `class_names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub class_names: Vec<String>,
    pub weights: Vec<f64>,
}

/// `total / (k * count)` over the k classes present; absent classes get 1.
pub fn class_weights(train: &FeatureMatrix) -> ClassWeights {
    let mut counts = vec![0usize; train.n_classes()];
    for &l in train.label_indices() {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let total = train.n_rows() as f64;
    let weights = counts.iter().map(|&c| if c == 0 { 1.0 } else { total / (present as f64 * c as f64) }).collect();
    ClassWeights { class_names: train.class_names.clone(), weights }
}
