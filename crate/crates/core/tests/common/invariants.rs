//! Pipeline invariants, shared by the invariant tests and the acceptance run.
//! Each check returns a description of the first violation found.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use teleop_core::dataset::{apply_scaler, fit_scaler, split_indices, SplitSpec};
use teleop_core::emulator::{
    emulate_session_with_stats, generate_dataset, GridCell, LinkParams, MovementClass, MovementProgram, RobotProfile,
    TlsChannelModel,
};
use teleop_core::features::{build_matrix, FeatureMatrix};
use teleop_core::nn::softmax_in_place;
use teleop_core::trace::{read_canonical, write_canonical, FlowTrace};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn matrix_strategy() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..6, 1usize..40).prop_flat_map(|(cols, rows)| {
        prop::collection::vec(prop::collection::vec(-1e6f64..1e6, cols), rows).prop_map(move |data| {
            let mut m = FeatureMatrix::with_columns((0..cols).map(|j| format!("c{j}")).collect(), vec!["a".into()]);
            for (i, r) in data.iter().enumerate() {
                m.push(r, "a", &format!("f{i}"));
            }
            m
        })
    })
}

pub fn scaler_maps_train_into_unit_interval() -> Result<(), String> {
    runner(256)
        .run(&matrix_strategy(), |m| {
            let s = fit_scaler(&m).unwrap();
            let scaled = apply_scaler(&s, &m).unwrap();
            for &v in scaled.data() {
                prop_assert!((0.0..=1.0).contains(&v), "scaled value {} outside [0, 1]", v);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn softmax_drift() -> Result<(), String> {
    runner(2048)
        .run(&prop::collection::vec(-745.0f64..745.0, 1..64), |z| {
            let mut p = z;
            softmax_in_place(&mut p);
            let drift = (p.iter().sum::<f64>() - 1.0).abs();
            prop_assert!(drift <= 1e-12, "drift {}", drift);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A labelled matrix with `flows` flows per class of 2 to 9 rows each.
fn flow_matrix(classes: usize, flows: usize, seed: u64) -> FeatureMatrix {
    let names: Vec<String> = (0..classes).map(|c| format!("k{c}")).collect();
    let mut m = FeatureMatrix::with_columns(vec!["v".into()], names.clone());
    let mut x = seed;
    for (c, name) in names.iter().enumerate() {
        for f in 0..flows {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let rows = 2 + (x >> 60) as usize % 8;
            for r in 0..rows {
                m.push(&[r as f64], name, &format!("k{c}-f{f}"));
            }
        }
    }
    m
}

pub fn splits_are_flow_atomic_and_seed_stable() -> Result<(), String> {
    runner(64)
        .run(&(1usize..6, 5usize..40, any::<u64>(), any::<u64>()), |(classes, flows, data_seed, split_seed)| {
            let m = flow_matrix(classes, flows, data_seed);
            let spec = SplitSpec { seed: split_seed, ..SplitSpec::default() };
            let a = split_indices(&m, &spec).unwrap();
            let b = split_indices(&m, &spec).unwrap();
            prop_assert_eq!(&a, &b, "same seed gave different splits");

            let mut all: Vec<usize> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..m.n_rows()).collect::<Vec<_>>(), "partitions are not disjoint and exhaustive");

            let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
            for (p, rows) in [&a.train, &a.validation, &a.test].iter().enumerate() {
                for &r in rows.iter() {
                    let prev = owner.insert(m.flow_id(r), p);
                    prop_assert!(prev.is_none() || prev == Some(p), "flow {} split across partitions", m.flow_id(r));
                }
            }
            let used: BTreeSet<usize> = owner.values().copied().collect();
            prop_assert!(used.contains(&0), "training partition is empty");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn canonical_bytes(flows: &[FlowTrace]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_canonical(flows, &mut buf).unwrap();
    buf
}

fn program_strategy() -> impl Strategy<Value = (MovementProgram, LinkParams)> {
    (
        0usize..7,
        prop::sample::select(vec![1.0, 5.0, 10.0, 50.0]),
        prop::sample::select(vec![25_000u32, 50_000, 100_000, 200_000]),
        1u32..6,
        prop::sample::select(vec![0.0, 10.0, 100.0]),
        prop::sample::select(vec![0.0, 10.0, 50.0]),
        any::<u64>(),
    )
        .prop_map(|(c, d, s, reps, delay, loss, seed)| {
            (
                MovementProgram::new(MovementClass::ALL[c], d, s, reps),
                LinkParams { delay_ms: delay, loss_pct: loss, seed, ..LinkParams::default() },
            )
        })
}

pub fn canonical_round_trip() -> Result<(), String> {
    let (tls, robot) = (TlsChannelModel::default(), RobotProfile::default());
    runner(64)
        .run(&prop::collection::vec(program_strategy(), 1..4), |cases| {
            let flows: Vec<FlowTrace> = cases
                .iter()
                .enumerate()
                .map(|(i, (p, l))| {
                    let (mut f, _) = emulate_session_with_stats(p, l, &tls, &robot).unwrap();
                    f.flow_id = format!("flow-{i}");
                    f
                })
                .collect();
            let bytes = canonical_bytes(&flows);
            let back = read_canonical(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), flows.len());
            for (a, b) in flows.iter().zip(&back) {
                prop_assert_eq!(&a.flow_id, &b.flow_id);
                prop_assert_eq!(a.label, b.label);
                prop_assert_eq!(&a.packets, &b.packets);
            }
            prop_assert_eq!(canonical_bytes(&back), bytes, "re-serialisation differs");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn emulator_is_deterministic() -> Result<(), String> {
    let grid: Vec<GridCell> = MovementClass::ALL
        .iter()
        .map(|&m| GridCell {
            program: MovementProgram::new(m, 5.0, 50_000, 4),
            link: LinkParams { delay_ms: 10.0, loss_pct: 10.0, ..LinkParams::default() },
        })
        .collect();
    let run = |seed| {
        let flows = generate_dataset(&grid, 5, seed, &TlsChannelModel::default(), &RobotProfile::default()).unwrap();
        let mut features = Vec::new();
        build_matrix(&flows).write_csv(&mut features).unwrap();
        (canonical_bytes(&flows), features)
    };
    let (a, fa) = run(77);
    let (b, fb) = run(77);
    if a != b || fa != fb {
        return Err("same seed produced different bytes".into());
    }
    if run(78).0 == a {
        return Err("different seeds produced identical traces".into());
    }
    Ok(())
}

/// Dropped share of first transmissions at 25% loss over at least 10^4
/// packets, against a three-sigma binomial band.
pub fn loss_rate_within_three_sigma() -> Result<(), String> {
    let p = 0.25;
    let program = MovementProgram::new(MovementClass::XY, 1.0, 25_000, 200);
    let (tls, robot) = (TlsChannelModel::default(), RobotProfile::default());
    let (mut sent, mut dropped) = (0u64, 0u64);
    let mut s = 0;
    while sent < 20_000 {
        let link = LinkParams { loss_pct: p * 100.0, seed: 9000 + s, ..LinkParams::default() };
        let (_, stats) = emulate_session_with_stats(&program, &link, &tls, &robot).map_err(|e| e.to_string())?;
        sent += stats.first_transmissions;
        dropped += stats.dropped_first;
        s += 1;
    }
    let observed = dropped as f64 / sent as f64;
    let sigma = (p * (1.0 - p) / sent as f64).sqrt();
    if (observed - p).abs() > 3.0 * sigma {
        return Err(format!(
            "dropped {observed:.4} of {sent} first transmissions, expected {p} +/- {:.4}",
            3.0 * sigma
        ));
    }
    Ok(())
}

pub type Check = (&'static str, fn() -> Result<(), String>);

pub const ALL: [Check; 6] = [
    ("scaler output in [0, 1]", scaler_maps_train_into_unit_interval),
    ("splits flow-atomic, disjoint, exhaustive, seed-stable", splits_are_flow_atomic_and_seed_stable),
    ("softmax drift <= 1e-12", softmax_drift),
    ("canonical round trip", canonical_round_trip),
    ("emulator byte-identical per seed", emulator_is_deterministic),
    ("loss rate within 3 sigma", loss_rate_within_three_sigma),
];
