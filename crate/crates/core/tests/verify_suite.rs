//! The self-verification suite must pass end to end with default options,
//! and the constraint-violating control must make the invariance check
//! fail (proving the check has teeth).

use eqpf_core::check::{run_suite, VerifyOptions};

#[test]
fn default_suite_passes_every_check() {
    let reports = run_suite(&VerifyOptions::default());
    assert!(reports.len() >= 25, "suite shrank: {} checks", reports.len());
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{} {:<45} {:>6.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.secs,
            r.detail
        );
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    assert!(failed.is_empty(), "failing checks: {failed:?}");
}

#[test]
fn generic_block_control_breaks_the_lemma_checks() {
    let opts = VerifyOptions {
        break_lemma: true,
        ..Default::default()
    };
    let reports = run_suite(&opts);
    let lemma = reports
        .iter()
        .find(|r| r.name == "lemma_invariance_single_lengthscale")
        .unwrap();
    assert!(
        !lemma.passed,
        "an unconstrained projection must break shift invariance: {}",
        lemma.detail
    );
}
