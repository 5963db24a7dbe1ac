use batchvote::greedy::exact_correctness;
use batchvote::oracle::{mc_correctness, McConfig};
use batchvote::{MechanismSpec, ModelParams};

/// 1000 seed-varied runs at 1e5 trials; at least 99% must land within
/// three standard errors of the exact value.
#[test]
fn estimates_cover_the_exact_value() {
    let spec = MechanismSpec::SingleBatch(3);
    let params = ModelParams::new(0.45, 0.6, 3).unwrap();
    let exact = exact_correctness(spec, &params).unwrap().value;
    assert!((exact - 0.648).abs() < 1e-12);
    let covered = (0..1000u64)
        .filter(|&seed| {
            let cfg = McConfig::new(100_000, seed).unwrap();
            let report = mc_correctness(spec, &params, &cfg).unwrap();
            cfg.covers(&report, exact)
        })
        .count();
    assert!(covered >= 990, "{covered}/1000 runs covered");
}
