//! Rate-weight sweep across several seeds.

use pd4g::config::RunConfig;
use pd4g::toyscene::SceneKind;
use pd4g::verify::lambda_sweep;

#[test]
fn active_count_is_non_increasing_and_mostly_strict() {
    let config = RunConfig::default();
    let mut strict = 0;
    for seed in 1..=3 {
        let counts: Vec<usize> = lambda_sweep(&config, SceneKind::Mixed, seed).unwrap().iter().map(|p| p.active_level0).collect();
        println!("seed {seed}: level-0 active {counts:?}");
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {counts:?}");
        if counts[2] < counts[0] {
            strict += 1;
        }
    }
    assert!(strict >= 2, "only {strict} of 3 seeds sparsify strictly");
}
