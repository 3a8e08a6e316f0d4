#![allow(dead_code)]

pub mod invariants;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::features::FeatureMatrix;
use teleop_core::nn::{MlpModel, ModelConfig, Params};

pub fn config(n_i: usize, n_h: usize, n_o: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_inputs: n_i,
        n_outputs: n_o,
        alpha: 2.0,
        n_train_samples: 0,
        hidden_size: n_h,
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 1,
        patience: 0,
        seed,
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, n_i: usize, n_o: usize) -> FeatureMatrix {
    let cols = (0..n_i).map(|j| format!("f{j}")).collect();
    let classes: Vec<String> = (0..n_o).map(|k| format!("c{k}")).collect();
    let mut m = FeatureMatrix::with_columns(cols, classes.clone());
    for r in 0..rows {
        let x: Vec<f64> = (0..n_i).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.push(&x, &classes[r % n_o], &format!("flow{}", r / 2));
    }
    m
}

/// Largest relative error between analytic and central-difference gradients
/// for one random network, batch and class weighting.
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_i = rng.gen_range(1..=8);
    let n_h = rng.gen_range(1..=12);
    let n_o = rng.gen_range(2..=6);
    let rows = rng.gen_range(1..=10);
    let mut model = MlpModel::init(config(n_i, n_h, n_o, seed), vec![], vec![]);
    // Nonzero biases so that the bias gradients are exercised too.
    for b in model.params.b1.iter_mut().chain(model.params.b2.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    let data = random_matrix(&mut rng, rows, n_i, n_o);
    let weights: Vec<f64> = (0..n_o).map(|_| rng.gen_range(0.2..3.0)).collect();
    let idx: Vec<usize> = (0..rows).collect();

    let mut grads = Params::zeros(n_i, n_h, n_o);
    model.backward(&data, &idx, &weights, &mut grads);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..model.params.len() {
        let orig = model.params.get_flat(k);
        model.params.set_flat(k, orig + h);
        let up = model.mean_loss(&data, &idx, &weights);
        model.params.set_flat(k, orig - h);
        let down = model.mean_loss(&data, &idx, &weights);
        model.params.set_flat(k, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get_flat(k);
        let denom = (analytic.abs() + numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}
