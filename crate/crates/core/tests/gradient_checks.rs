//! Analytic gradients against central differences over 100 seeds.

mod common;

use common::grad::{composite_suite, flow_suite, joint_suite, TOLERANCE};

const SEEDS: u64 = 100;

#[test]
fn composite_graph_gradients() {
    let s = composite_suite(SEEDS).unwrap();
    assert!(s.worst < TOLERANCE);
    assert_eq!(s.retried, 0, "the composite graph is smooth");
}

#[test]
fn flow_log_density_gradients() {
    let s = flow_suite(SEEDS).unwrap();
    assert!(s.retried * 100 < s.checked, "{s:?}");
}

#[test]
fn joint_objective_gradients() {
    let s = joint_suite(SEEDS).unwrap();
    assert!(s.retried * 100 < s.checked, "{s:?}");
}
