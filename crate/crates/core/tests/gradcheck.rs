mod common;

use common::grad::{self, Composed, GRAD_TOL, LAYER_CASES};

const INSTANCES: u64 = 3;

#[test]
fn every_layer_matches_finite_differences() {
    for (name, case) in LAYER_CASES {
        for s in 0..INSTANCES {
            let err = case(s);
            assert!(
                err < GRAD_TOL,
                "{name} instance {s}: relative error {err:e}"
            );
        }
    }
}

#[test]
fn model_with_idl_loss_in_train_mode() {
    let (err, _) = grad::composed(Composed::Idl { tau: 10.0 }, true, 4, 0, 3);
    assert!(err < GRAD_TOL, "{err:e}");
    let (err, _) = grad::composed(Composed::Idl { tau: 1.0 }, true, 6, 100, 2);
    assert!(err < GRAD_TOL, "{err:e}");
}

#[test]
fn model_with_idl_loss_in_inference_mode() {
    let (err, _) = grad::composed(Composed::Idl { tau: 10.0 }, false, 4, 200, 2);
    assert!(err < GRAD_TOL, "{err:e}");
}

#[test]
fn model_with_bce_in_train_mode() {
    let (err, _) = grad::composed(Composed::Bce, true, 3, 300, 2);
    assert!(err < GRAD_TOL, "{err:e}");
}

#[test]
fn comparison_notices_small_discrepancies() {
    use common::grad::rel_err;
    assert!(rel_err(&[1.0, -2.0], &[1.0, -2.0]) == 0.0);
    assert!(rel_err(&[1.0, -2.0], &[1.0, -2.0001]) > GRAD_TOL);
    // vanishing gradients are compared against the floor, not each other
    assert!(rel_err(&[1e-17], &[2e-12]) < GRAD_TOL);
    assert!(rel_err(&[0.0], &[1e-10]) > GRAD_TOL);
}
