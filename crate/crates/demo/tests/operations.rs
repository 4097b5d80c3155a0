use dflora_demo::{bench_curve, mini_run, projection_histogram, MAX_MINI_BUDGET};

#[test]
fn bench_curve_is_monotone_and_beats_random_on_sphere() {
    let c = bench_curve("cma", "sphere", 10, 3000, 0).unwrap();
    assert!(c.best.windows(2).all(|w| w[1] <= w[0]));
    assert!(c.evaluations.windows(2).all(|w| w[1] > w[0]));
    assert!(*c.evaluations.last().unwrap() <= 3000);
    assert!(*c.best.last().unwrap() < c.random_best);
    assert!(bench_curve("nelder", "sphere", 10, 100, 0).is_err());
    assert!(bench_curve("fwa", "sphere", 10, 1_000_000, 0).is_err());
}

#[test]
fn histogram_follows_the_init_law() {
    let h = projection_histogram("RIL", 2.0, 400, 256, 3, 80).unwrap();
    assert_eq!(h.entries, 102_400);
    assert!((h.target_std - 0.1).abs() < 1e-15);
    assert!((h.measured_std / h.target_std - 1.0).abs() < 0.02);
    let inside: usize = h.counts.iter().sum();
    assert!(inside as f64 > 0.999 * h.entries as f64);
    let ri = projection_histogram("ri", 2.0, 400, 10, 3, 10).unwrap();
    assert_eq!(ri.target_std, 0.5);
    assert!(projection_histogram("RIL", 2.0, 400, 256, 3, 0).is_err());
}

#[test]
fn mini_run_reports_a_bounded_search() {
    let r = mini_run("f_lora", 60, 400, 2).unwrap();
    assert!(r.consumed <= 400);
    assert_eq!(r.records.last().unwrap().consumed, r.consumed);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("best_dev_accuracy"));
    assert!(mini_run("f_lora", 60, MAX_MINI_BUDGET + 1, 2).is_err());
    assert!(mini_run("sgd", 60, 400, 2).is_err());
}
