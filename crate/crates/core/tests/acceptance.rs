//! One test per acceptance criterion. Each writes a PASS/FAIL line to stderr.

use std::io::Write as _;

use pd4g::config::RunConfig;
use pd4g::verify::{run_criterion, VerifyOptions};

fn criterion(id: u8) {
    let outcome = run_criterion(id, &VerifyOptions::new(RunConfig::default()));
    // Straight to stderr so the line shows up even when output is captured.
    let _ = writeln!(std::io::stderr(), "{}", outcome.line());
    assert!(outcome.passed, "{}", outcome.line());
}

#[test]
fn c01_latency_table_reproduction() {
    criterion(1);
}

#[test]
fn c02_rollout_distribution_endpoints() {
    criterion(2);
}

#[test]
fn c03_entropy_model_matches_quadrature_oracle() {
    criterion(3);
}

#[test]
fn c04_gradients_match_finite_differences() {
    criterion(4);
}

#[test]
fn c05_every_chunk_boundary_prefix_decodes() {
    criterion(5);
}

#[test]
fn c06_psnr_rises_with_level() {
    criterion(6);
}

#[test]
fn c07_activation_rate_tracks_motion() {
    criterion(7);
}

#[test]
fn c08_rate_weight_sweep_sparsifies_base_layer() {
    criterion(8);
}

#[test]
fn c09_masks_binarize_under_consistency_terms() {
    criterion(9);
}

#[test]
fn c10_rate_model_ranks_like_the_compressor() {
    criterion(10);
}

#[test]
fn c11_simulator_is_exact() {
    criterion(11);
}

#[test]
fn corrupted_entropy_floor_fails_the_oracle_check() {
    let opts = VerifyOptions { corrupt_entropy: true, ..VerifyOptions::new(RunConfig::default()) };
    let outcome = run_criterion(3, &opts);
    let _ = writeln!(std::io::stderr(), "hooked: {}", outcome.line());
    assert!(!outcome.passed);
}
