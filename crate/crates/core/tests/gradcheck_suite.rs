//! Full-strength finite-difference verification of the gradient engine:
//! twenty random instances of every operation row plus the end-to-end
//! model row, at both precisions.

use aasn_core::gradcheck::{format_table, run_suite, suite_passes};

#[test]
fn every_op_and_the_end_to_end_loss_pass_at_32_bit() {
    let results = run_suite::<f32>(20, None).unwrap();
    assert!(suite_passes(&results), "\n{}", format_table(&results));
}

#[test]
fn every_op_and_the_end_to_end_loss_pass_at_64_bit() {
    let results = run_suite::<f64>(20, None).unwrap();
    assert!(suite_passes(&results), "\n{}", format_table(&results));
}
