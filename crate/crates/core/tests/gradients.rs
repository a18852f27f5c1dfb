mod common;

use common::gradcheck::{check_encoder, check_op, op_cases, TOL};

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        let e = check_op(&case);
        assert!(e <= TOL, "{}: relative error {e:.2e}", case.name);
    }
}

#[test]
fn tiny_vit_and_heads_match_central_differences() {
    let (full, backbone) = check_encoder();
    assert!(full <= TOL, "encoder loss: relative error {full:.2e}");
    assert!(backbone <= TOL, "backbone features: relative error {backbone:.2e}");
}
