//! Single-hidden-layer perceptron: ReLU hidden layer, softmax output,
//! class-weighted categorical cross-entropy, trained with Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{class_weights, ScalerParams};
use crate::features::FeatureMatrix;
use crate::seed;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{name} must be positive, got {value}")]
    Domain { name: &'static str, value: f64 },
    #[error("expected {expected} inputs, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("flow has no rows")]
    EmptyFlow,
    #[error("label {0:?} is not in the model vocabulary")]
    UnknownLabel(String),
    #[error("columns differ from the model's: expected {expected:?}, found {found:?}")]
    Columns { expected: Vec<String>, found: Vec<String> },
}

/// `floor(n_s / (alpha * (n_i + n_o)))`, at least 1.
pub fn hidden_layer_size(n_s: usize, alpha: f64, n_i: usize, n_o: usize) -> Result<usize, NnError> {
    for (name, v) in [("N_s", n_s as f64), ("alpha", alpha), ("N_i", n_i as f64), ("N_o", n_o as f64)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(NnError::Domain { name, value: v });
        }
    }
    Ok(((n_s as f64 / (alpha * (n_i + n_o) as f64)).floor() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub alpha: f64,
    pub n_train_samples: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

/// Training hyper-parameters; the layer sizes are filled in from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Overrides the hidden-size formula when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            alpha: 2.0,
            learning_rate: 1e-5,
            batch_size: 32,
            epochs: 300,
            patience: 30,
            seed: 0,
            hidden_size: None,
        }
    }
}

impl TrainParams {
    pub fn config_for(&self, n_inputs: usize, n_outputs: usize, n_train: usize) -> Result<ModelConfig, NnError> {
        let hidden_size = match self.hidden_size {
            Some(h) if h > 0 => h,
            Some(h) => return Err(NnError::Domain { name: "hidden_size", value: h as f64 }),
            None => hidden_layer_size(n_train, self.alpha, n_inputs, n_outputs)?,
        };
        if self.batch_size == 0 {
            return Err(NnError::Domain { name: "batch_size", value: 0.0 });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NnError::Domain { name: "learning_rate", value: self.learning_rate });
        }
        Ok(ModelConfig {
            n_inputs,
            n_outputs,
            alpha: self.alpha,
            n_train_samples: n_train,
            hidden_size,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        })
    }
}

/// Weights of both layers, row-major. Gradients and Adam moments share the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// inputs x hidden
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// outputs x hidden
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    pub fn zeros(n_i: usize, n_h: usize, n_o: usize) -> Self {
        Params { w1: vec![0.0; n_h * n_i], b1: vec![0.0; n_h], w2: vec![0.0; n_o * n_h], b2: vec![0.0; n_o] }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view, in w1, b1, w2, b2 order.
    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn get_flat(&self, k: usize) -> f64 {
        let mut k = k;
        for s in self.slices() {
            if k < s.len() {
                return s[k];
            }
            k -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, k: usize, v: f64) {
        let mut k = k;
        for s in self.slices_mut() {
            if k < s.len() {
                s[k] = v;
                return;
            }
            k -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn fill(&mut self, v: f64) {
        for s in self.slices_mut() {
            s.fill(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub columns: Vec<String>,
    /// Scaler to apply to raw rows before inference, if the model owns one.
    pub scaler: Option<ScalerParams>,
    pub params: Params,
}

/// Batch-invariant scratch buffers.
struct Scratch {
    h: Vec<f64>,
    p: Vec<f64>,
    dh: Vec<f64>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, class_names: Vec<String>, columns: Vec<String>) -> Self {
        let (n_i, n_h, n_o) = (config.n_inputs, config.hidden_size, config.n_outputs);
        let mut rng = seed::rng(config.seed, "init", &[]);
        let mut params = Params::zeros(n_i, n_h, n_o);
        let l1 = (6.0 / (n_i + n_h) as f64).sqrt();
        params.w1.iter_mut().for_each(|w| *w = rng.gen_range(-l1..=l1));
        let l2 = (6.0 / (n_h + n_o) as f64).sqrt();
        params.w2.iter_mut().for_each(|w| *w = rng.gen_range(-l2..=l2));
        MlpModel { config, class_names, columns, scaler: None, params }
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            h: vec![0.0; self.config.hidden_size],
            p: vec![0.0; self.config.n_outputs],
            dh: vec![0.0; self.config.hidden_size],
        }
    }

    fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        let n_h = self.config.hidden_size;
        let Params { w1, b1, w2, b2 } = &self.params;
        s.h.copy_from_slice(b1);
        for (i, &v) in x.iter().enumerate() {
            let row = &w1[i * n_h..(i + 1) * n_h];
            for (h, w) in s.h.iter_mut().zip(row) {
                *h += v * w;
            }
        }
        s.h.iter_mut().for_each(|h| *h = h.max(0.0));
        for (k, p) in s.p.iter_mut().enumerate() {
            let row = &w2[k * n_h..(k + 1) * n_h];
            *p = b2[k] + dot(row, &s.h);
        }
        softmax_in_place(&mut s.p);
    }

    /// Class probabilities for one scaled input row.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.config.n_inputs {
            return Err(NnError::Dimension { expected: self.config.n_inputs, found: x.len() });
        }
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        Ok(s.p)
    }

    /// Hidden activations for one input row.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        s.h
    }

    /// Mean weighted loss and its gradient over `rows` of `data`.
    pub fn backward(&self, data: &FeatureMatrix, rows: &[usize], weights: &[f64], grads: &mut Params) -> f64 {
        let mut s = self.scratch();
        self.accumulate(data, rows, weights, grads, &mut s).0
    }

    fn accumulate(
        &self,
        data: &FeatureMatrix,
        rows: &[usize],
        weights: &[f64],
        grads: &mut Params,
        s: &mut Scratch,
    ) -> (f64, usize) {
        grads.fill(0.0);
        let n_h = self.config.hidden_size;
        let labels = data.label_indices();
        let scale = 1.0 / rows.len() as f64;
        let mut total = 0.0;
        let mut correct = 0;
        for &r in rows {
            let x = data.row(r);
            let y = labels[r];
            let w = weights[y];
            self.forward_into(x, s);
            total += loss(&s.p, y, w);
            correct += usize::from(argmax(&s.p) == y);
            // dL/dz2 = w (p - onehot(y)) / batch
            for (k, p) in s.p.iter_mut().enumerate() {
                *p = w * scale * (*p - if k == y { 1.0 } else { 0.0 });
            }
            s.dh.fill(0.0);
            for (k, &d) in s.p.iter().enumerate() {
                grads.b2[k] += d;
                let gw = &mut grads.w2[k * n_h..(k + 1) * n_h];
                let w2 = &self.params.w2[k * n_h..(k + 1) * n_h];
                for j in 0..n_h {
                    gw[j] += d * s.h[j];
                    s.dh[j] += d * w2[j];
                }
            }
            for ((d, &h), gb) in s.dh.iter_mut().zip(&s.h).zip(&mut grads.b1) {
                if h <= 0.0 {
                    *d = 0.0;
                }
                *gb += *d;
            }
            for (i, &v) in x.iter().enumerate() {
                let gw = &mut grads.w1[i * n_h..(i + 1) * n_h];
                for (g, d) in gw.iter_mut().zip(&s.dh) {
                    *g += v * d;
                }
            }
        }
        (total * scale, correct)
    }

    /// Mean weighted loss over `rows` without gradients.
    pub fn mean_loss(&self, data: &FeatureMatrix, rows: &[usize], weights: &[f64]) -> f64 {
        let mut s = self.scratch();
        let labels = data.label_indices();
        let sum: f64 = rows
            .iter()
            .map(|&r| {
                self.forward_into(data.row(r), &mut s);
                loss(&s.p, labels[r], weights[labels[r]])
            })
            .sum();
        sum / rows.len() as f64
    }

    fn check_columns(&self, m: &FeatureMatrix) -> Result<(), NnError> {
        if m.column_names != self.columns {
            return Err(NnError::Columns { expected: self.columns.clone(), found: m.column_names.clone() });
        }
        Ok(())
    }

    /// Probabilities for every row of an already scaled matrix.
    pub fn predict_proba(&self, m: &FeatureMatrix) -> Result<Vec<Vec<f64>>, NnError> {
        self.check_columns(m)?;
        let mut s = self.scratch();
        Ok((0..m.n_rows())
            .map(|i| {
                self.forward_into(m.row(i), &mut s);
                s.p.clone()
            })
            .collect())
    }

    /// Arg-max class index per row.
    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<usize>, NnError> {
        Ok(self.predict_proba(m)?.iter().map(|p| argmax(p)).collect())
    }

    /// Map a matrix's labels onto this model's vocabulary.
    pub fn label_map(&self, m: &FeatureMatrix) -> Result<Vec<usize>, NnError> {
        m.class_names
            .iter()
            .map(|c| self.class_names.iter().position(|k| k == c).ok_or_else(|| NnError::UnknownLabel(c.clone())))
            .collect()
    }
}

/// Dot product with eight independent accumulators so the compiler can keep
/// it in vector registers; the summation order is fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Weighted cross-entropy of one prediction.
pub fn loss(p: &[f64], y: usize, w: f64) -> f64 {
    -w * p[y].max(PROB_FLOOR).ln()
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One bias-corrected Adam update over parameter slices laid end to end.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            assert_eq!(p.len(), g.len(), "parameter and gradient shapes differ");
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut Params, grads: &Params, lr: f64) {
    let [w1, b1, w2, b2] = params.slices_mut();
    state.step(&mut [w1, b1, w2, b2], &grads.slices(), lr);
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Train on scaled matrices. Returns the snapshot with the best validation
/// accuracy (earliest on ties) and the per-epoch curve. Train loss and
/// accuracy are running means over the epoch's mini-batches.
pub fn train(
    params: &TrainParams,
    train_m: &FeatureMatrix,
    val_m: &FeatureMatrix,
) -> Result<(MlpModel, TrainingCurve), NnError> {
    if train_m.is_empty() || val_m.is_empty() {
        return Err(NnError::Empty);
    }
    if train_m.column_names != val_m.column_names {
        return Err(NnError::Columns { expected: train_m.column_names.clone(), found: val_m.column_names.clone() });
    }
    let config = params.config_for(train_m.n_cols(), train_m.n_classes(), train_m.n_rows())?;
    let mut model = MlpModel::init(config.clone(), train_m.class_names.clone(), train_m.column_names.clone());

    let weights = class_weights(train_m).weights;
    let val_map = model.label_map(val_m)?;
    let val_labels: Vec<usize> = val_m.label_indices().iter().map(|&l| val_map[l]).collect();
    let val_weights: Vec<f64> = val_m
        .class_names
        .iter()
        .map(|c| {
            let k = model.class_names.iter().position(|n| n == c).expect("mapped above");
            weights[k]
        })
        .collect();

    let mut adam = AdamState::new(model.params.len());
    let mut grads = Params::zeros(config.n_inputs, config.hidden_size, config.n_outputs);
    let mut scratch = model.scratch();
    let mut order: Vec<usize> = (0..train_m.n_rows()).collect();
    let val_rows: Vec<usize> = (0..val_m.n_rows()).collect();
    let mut shuffle_rng = seed::rng(config.seed, "shuffle", &[]);

    let mut curve = TrainingCurve::default();
    let mut best = (f64::NEG_INFINITY, model.params.clone());
    let mut best_loss = f64::INFINITY;
    let mut since_improvement = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            // Accuracy is that of the pre-update weights on this batch.
            let (l, hits) = model.accumulate(train_m, batch, &weights, &mut grads, &mut scratch);
            correct += hits;
            loss_sum += l * batch.len() as f64;
            adam_step(&mut adam, &mut model.params, &grads, config.learning_rate);
        }

        let (val_loss, val_acc) = {
            let mut sum = 0.0;
            let mut hits = 0usize;
            for &r in &val_rows {
                model.forward_into(val_m.row(r), &mut scratch);
                let y = val_labels[r];
                sum += loss(&scratch.p, y, val_weights[val_m.label_indices()[r]]);
                hits += usize::from(argmax(&scratch.p) == y);
            }
            (sum / val_rows.len() as f64, hits as f64 / val_rows.len() as f64)
        };
        curve.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            val_loss,
            val_accuracy: val_acc,
        });

        let mut improved = false;
        if val_acc > best.0 {
            best = (val_acc, model.params.clone());
            curve.best_epoch = epoch;
            improved = true;
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            improved = true;
        }
        since_improvement = if improved { 0 } else { since_improvement + 1 };
        if config.patience > 0 && since_improvement >= config.patience {
            curve.stopped_early = true;
            break;
        }
    }
    if config.epochs > 0 {
        model.params = best.1;
    }
    Ok((model, curve))
}

/// Majority vote over a flow's rows; ties go to the tied class with the
/// highest summed probability.
pub fn vote(probs: &[Vec<f64>]) -> Result<usize, NnError> {
    let first = probs.first().ok_or(NnError::EmptyFlow)?;
    let k = first.len();
    let mut votes = vec![0usize; k];
    let mut mass = vec![0.0; k];
    for p in probs {
        votes[argmax(p)] += 1;
        for (m, v) in mass.iter_mut().zip(p) {
            *m += v;
        }
    }
    let top = *votes.iter().max().expect("non-empty");
    let mut best = None;
    for c in 0..k {
        if votes[c] == top && best.is_none_or(|b: usize| mass[c] > mass[b]) {
            best = Some(c);
        }
    }
    Ok(best.expect("some class has the top vote"))
}

pub fn predict_flow(model: &MlpModel, rows: &[&[f64]]) -> Result<usize, NnError> {
    let probs: Vec<Vec<f64>> = rows.iter().map(|r| model.forward(r)).collect::<Result<_, _>>()?;
    vote(&probs)
}

/// Precision, recall and confusion for one prediction list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// confusion[truth][predicted]
    pub confusion: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub support: Vec<u64>,
    pub accuracy: f64,
    /// Mean recall over classes with support.
    pub macro_accuracy: f64,
}

impl Metrics {
    pub fn from_predictions(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted_count: Vec<u64> = (0..n_classes).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = (0..n_classes).map(|c| ratio(confusion[c][c], predicted_count[c])).collect();
        let recall: Vec<f64> = (0..n_classes).map(|c| ratio(confusion[c][c], support[c])).collect();
        let hits: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
        let present: Vec<usize> = (0..n_classes).filter(|&c| support[c] > 0).collect();
        let macro_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| recall[c]).sum::<f64>() / present.len() as f64
        };
        Metrics { confusion, precision, recall, support, accuracy: ratio(hits, truth.len() as u64), macro_accuracy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_row: Metrics,
    pub per_flow: Metrics,
    /// Flow ids with their true and voted class indices.
    pub flows: Vec<(String, usize, usize)>,
}

/// Evaluate on a scaled, labelled matrix.
pub fn evaluate(model: &MlpModel, test: &FeatureMatrix) -> Result<EvalReport, NnError> {
    let map = model.label_map(test)?;
    let probs = model.predict_proba(test)?;
    let truth: Vec<usize> = test.label_indices().iter().map(|&l| map[l]).collect();
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let k = model.class_names.len();

    let mut flows = Vec::new();
    for (id, rows) in test.flow_groups() {
        let fp: Vec<Vec<f64>> = rows.iter().map(|&r| probs[r].clone()).collect();
        flows.push((id, truth[rows[0]], vote(&fp)?));
    }
    let ft: Vec<usize> = flows.iter().map(|f| f.1).collect();
    let fpred: Vec<usize> = flows.iter().map(|f| f.2).collect();
    Ok(EvalReport {
        class_names: model.class_names.clone(),
        per_row: Metrics::from_predictions(k, &truth, &predicted),
        per_flow: Metrics::from_predictions(k, &ft, &fpred),
        flows,
    })
}
