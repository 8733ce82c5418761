mod common;

use common::suite::{op_cases, whole_model_error};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, case) in op_cases() {
        for seed in 0..8 {
            let err = case(seed);
            if !(err <= TOLERANCE) {
                failures.push(format!("{name} seed {seed}: {err:.3e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn backbone_loss_gradient() {
    let err = whole_model_error(1, false, 20);
    assert!(err <= TOLERANCE, "{err:e}");
}

#[test]
fn prompt_loss_gradient() {
    let err = whole_model_error(2, true, 20);
    assert!(err <= TOLERANCE, "{err:e}");
}
