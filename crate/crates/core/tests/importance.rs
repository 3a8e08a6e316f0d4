use teleop_core::experiment::permutation_importance;
use teleop_core::features::FeatureMatrix;
use teleop_core::nn::{evaluate, train, TrainParams};

/// With one column fully defining the label and one carrying noise, shuffling
/// the defining column drops accuracy to chance: importance is close to
/// accuracy minus 1/k. The noise column scores close to zero.
#[test]
fn defining_column_scores_accuracy_minus_chance() {
    let k = 4;
    let names: Vec<String> = (0..k).map(|c| format!("k{c}")).collect();
    let cols = vec!["signal".to_string(), "noise".to_string()];
    let mut m = FeatureMatrix::with_columns(cols.clone(), names.clone());
    let mut x = 17u64;
    for i in 0..800 {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let c = i % k;
        let noise = (x >> 11) as f64 / (1u64 << 53) as f64;
        m.push(&[(c as f64 + 0.5) / k as f64, noise], &names[c], &format!("f{i}"));
    }
    let p = TrainParams { learning_rate: 1e-2, epochs: 150, patience: 0, seed: 1, ..TrainParams::default() };
    let (model, _) = train(&p, &m, &m).unwrap();
    let acc = evaluate(&model, &m).unwrap().per_row.accuracy;
    assert!(acc > 0.95, "accuracy {acc}");

    let mut with_unused = cols.clone();
    with_unused.push("absent".into());
    let imp = permutation_importance(&model, &m, 10, 3, &with_unused).unwrap();
    let expected = acc - 1.0 / k as f64;
    assert!((imp[0].importance - expected).abs() < 0.05, "signal {} vs {expected}", imp[0].importance);
    assert!(imp[1].importance.abs() < 0.03, "noise {}", imp[1].importance);
    assert_eq!(imp[2].importance, 0.0);
}
