//! Acceptance suite: every quantitative claim the laboratory checks, each
//! with its tolerance pinned in code. One test per criterion; each prints a
//! single pass/fail line (run with `--nocapture` to see them on success).

use fermi_twist::experiments::acceptance::{self, CriterionResult};

fn check(r: CriterionResult) {
    println!(
        "criterion {:2} [{}] {}: measured {} (threshold {}) in {:.1}s",
        r.id,
        if r.pass { "PASS" } else { "FAIL" },
        r.name,
        r.measured,
        r.threshold,
        r.runtime_s
    );
    assert!(
        r.pass,
        "criterion {} failed: {} (measured {}, threshold {})",
        r.id, r.name, r.measured, r.threshold
    );
}

#[test]
fn criterion_01_area_preservation() {
    check(acceptance::criterion_01_area_preservation());
}

#[test]
fn criterion_02_pushforward_consistency() {
    check(acceptance::criterion_02_pushforward_consistency());
}

#[test]
fn criterion_03_density_bounds() {
    check(acceptance::criterion_03_density_bounds());
}

#[test]
fn criterion_04_expansion_bounds() {
    check(acceptance::criterion_04_expansion_bounds());
}

#[test]
fn criterion_05_decomposition_mass_and_inclusions() {
    check(acceptance::criterion_05_decomposition_mass_and_inclusions());
}

#[test]
fn criterion_06_cell_measure_scaling() {
    check(acceptance::criterion_06_cell_measure_scaling());
}

#[test]
fn criterion_07_band_finiteness_threshold() {
    check(acceptance::criterion_07_band_finiteness_threshold());
}

#[test]
fn criterion_08_one_step_decay() {
    check(acceptance::criterion_08_one_step_decay());
}

#[test]
fn criterion_09_fourier_decay() {
    check(acceptance::criterion_09_fourier_decay());
}

#[test]
fn criterion_10_periodicity_decay() {
    check(acceptance::criterion_10_periodicity_decay());
}

#[test]
fn criterion_11_averaging_inequality() {
    check(acceptance::criterion_11_averaging_inequality());
}

#[test]
fn criterion_12_walk_drift() {
    check(acceptance::criterion_12_walk_drift());
}

#[test]
fn criterion_13_tau_tail() {
    check(acceptance::criterion_13_tau_tail());
}

#[test]
fn criterion_14_regime_sanity() {
    check(acceptance::criterion_14_regime_sanity());
}

#[test]
fn criterion_15_iterate_count_formula() {
    check(acceptance::criterion_15_iterate_count_formula());
}
