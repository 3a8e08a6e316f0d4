mod common;

use common::invariants;

#[test]
fn scaler_maps_train_into_unit_interval() {
    invariants::scaler_maps_train_into_unit_interval().unwrap();
}

#[test]
fn splits_are_flow_atomic_and_seed_stable() {
    invariants::splits_are_flow_atomic_and_seed_stable().unwrap();
}

#[test]
fn softmax_drift() {
    invariants::softmax_drift().unwrap();
}

#[test]
fn canonical_round_trip() {
    invariants::canonical_round_trip().unwrap();
}

#[test]
fn emulator_is_deterministic() {
    invariants::emulator_is_deterministic().unwrap();
}

#[test]
fn loss_rate_within_three_sigma() {
    invariants::loss_rate_within_three_sigma().unwrap();
}
