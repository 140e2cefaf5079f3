mod common;

use common::*;
use labnn::{BinarizerChoice, Padding};

#[test]
fn graph_ops_match_finite_differences() {
    for (name, e) in op_gradient_suite() {
        assert!(e.checked > 0, "{name}");
        assert!(e.max_rel <= OP_TOLERANCE, "{name}: {e:?}");
    }
}

#[test]
fn lab_surrogate_backward_matches_finite_differences() {
    for (seed, pad) in [(1, Padding::SAME_ZERO), (2, Padding::Valid), (3, Padding::SAME_MINUS_ONE)] {
        let e = lab_surrogate_check(seed, pad);
        assert!(e.max_rel <= OP_TOLERANCE, "{pad:?}: {e:?}");
    }
}

#[test]
fn relaxed_sign_network_matches_finite_differences() {
    let e = end_to_end_check(tiny_spec(BinarizerChoice::Sign, 2, 3), 7);
    assert!(e.checked > 300);
    assert!(e.max_rel <= END_TO_END_TOLERANCE, "{e:?}");
}

#[test]
fn relaxed_lab_network_matches_finite_differences() {
    let e = end_to_end_check(tiny_spec(BinarizerChoice::Lab, 2, 3), 7);
    assert!(e.max_rel <= END_TO_END_TOLERANCE, "{e:?}");
}

#[test]
fn relaxed_network_with_prelu_before_add() {
    let mut spec = tiny_spec(BinarizerChoice::Lab, 2, 3);
    spec.prelu_after_add = false;
    let e = end_to_end_check(spec, 11);
    assert!(e.max_rel <= END_TO_END_TOLERANCE, "{e:?}");
}
