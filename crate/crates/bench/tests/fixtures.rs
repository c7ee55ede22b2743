use turnkit::ctc::{ctc_loss, min_frames};
use turnkit_bench::{engine, features, log_probs, target};

#[test]
fn log_prob_rows_normalise() {
    let lp = log_probs(10, 24, 1);
    for r in 0..lp.rows() {
        let s: f64 = lp.row(r).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bench_targets_are_feasible() {
    for t in [25usize, 50, 100] {
        let y = target(t / 5, 24, 2);
        assert!(y.iter().all(|&l| (1..24).contains(&l)));
        assert!(min_frames(&y) <= t);
        assert!(ctc_loss(&log_probs(t, 24, 1), &y).unwrap().loss.is_finite());
    }
}

#[test]
fn inputs_are_deterministic_and_fit_the_engine() {
    assert_eq!(features(8, 16, 3), features(8, 16, 3));
    let (model, params) = engine(0);
    let a = model.analyze(&params, &features(160, model.cfg.encoder.input_dim, 7)).unwrap();
    assert_eq!(a.encoded.len(), 160 / model.cfg.encoder.subsampling_factor);
}
