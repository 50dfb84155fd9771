//! Gradient-check command: run the finite-difference suite at both
//! precisions and report one table per dtype.

use aasn_core::error::Result;
use aasn_core::gradcheck::{format_table, run_suite, suite_passes, CheckResult};

pub struct CheckReport {
    pub f32_rows: Vec<CheckResult>,
    pub f64_rows: Vec<CheckResult>,
    pub passed: bool,
}

/// `sabotage` corrupts the named row's analytic gradient, proving the
/// harness can fail; the report then must come back failed.
pub fn run(instances: usize, sabotage: Option<&str>, verbose: bool) -> Result<CheckReport> {
    let f32_rows = run_suite::<f32>(instances, sabotage)?;
    let f64_rows = run_suite::<f64>(instances, sabotage)?;
    let passed = suite_passes(&f32_rows) && suite_passes(&f64_rows);
    if verbose {
        println!("== f32 ==");
        print!("{}", format_table(&f32_rows));
        println!("== f64 (shadow precision) ==");
        print!("{}", format_table(&f64_rows));
        println!("{}", if passed { "all checks passed" } else { "CHECK FAILURE" });
    }
    Ok(CheckReport { f32_rows, f64_rows, passed })
}
