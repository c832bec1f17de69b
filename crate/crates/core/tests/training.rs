use diagnet_core::synth::{gen_dataset, SynthSpec};
use diagnet_core::trainer::{smooth, train, Sequential, TrainConfig};

#[test]
fn default_run_converges_without_blowing_up() {
    let scenes = gen_dataset(0x7a11, 200, &SynthSpec::default()).unwrap();
    let cfg = TrainConfig::default();
    let (ck, log) = train(&scenes, &cfg, &Sequential).unwrap();
    assert_eq!(log.rows.len(), cfg.epochs);

    // The plateau jitters by a few 1e-4 of the starting value.
    let curve = smooth(&log.diag(), 10);
    let slack = 1e-3 * curve[0];
    for (i, w) in curve.windows(2).enumerate() {
        assert!(
            w[1] <= w[0] + slack,
            "smoothed Phase-A loss rose at window {i}: {} -> {}",
            w[0],
            w[1]
        );
    }
    assert!(curve[curve.len() - 1] < 0.75 * curve[0]);
    for p in ck.params() {
        assert!(p.data().iter().all(|v| v.abs() < 1e6));
    }

    let (again, log2) = train(&scenes, &cfg, &Sequential).unwrap();
    assert_eq!(log2, log);
    assert_eq!(again, ck);
}
