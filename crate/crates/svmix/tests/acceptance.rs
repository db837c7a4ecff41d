//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Tolerances are pinned inside each check in `svmix::verify` and are
//! echoed on every line. The learning criterion trains three seeds of the
//! lite figure-eight scenario for 200 episodes and takes a few minutes.

use svmix::verify::{self, CheckResult, Settings};

#[test]
fn acceptance() {
    let s = Settings::default();
    let checks: Vec<CheckResult> = vec![
        verify::res_enumeration(&s),
        verify::res_monte_carlo(&s),
        verify::spectrum_closed_form(&s),
        verify::full_rank(&s),
        verify::gradient_fidelity(&s),
        verify::mixer_monotonicity(&s),
        verify::loss_oracles(&s),
        verify::overhead_table(&s),
        verify::simulator_sanity(&s),
        verify::learning_smoke(&s, &[0, 1, 2], 200),
        verify::sweep_shape(&s),
    ];
    for c in &checks {
        println!("{}", c.line());
    }

    let mut covered: Vec<u8> = checks.iter().filter_map(|c| c.criterion).collect();
    covered.dedup();
    assert_eq!(covered, (1..=10).collect::<Vec<u8>>());

    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.is_empty(), "failed: {}", failed.join(", "));
}
