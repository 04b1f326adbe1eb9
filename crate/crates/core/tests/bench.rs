use raa_core::bench::{bench_csv, ratio_checks, run_bench, BenchConfig, BenchMode, BENCH_HEADER};

#[test]
fn flop_scaling_on_small_grids() {
    let cfg = BenchConfig {
        sizes: vec![8, 16, 32],
        windows: vec![3, 5],
        repeats: 1,
        d_proj: 8,
        mlp_hidden: 4,
        seed: 3,
    };
    let rows = run_bench(&cfg).unwrap();
    assert_eq!(rows.iter().filter(|r| r.mode == BenchMode::Global).count(), 3);
    let flop_checks: Vec<_> = ratio_checks(&rows).into_iter().filter(|c| c.label.contains("flops")).collect();
    // k=3 8->16, 16->32; k=5 16->32; global 8->16, 16->32
    assert_eq!(flop_checks.len(), 5);
    for c in &flop_checks {
        assert!(c.passed(), "{c:?}");
    }
    for r in &rows {
        assert!(r.median_secs > 0.0 && r.flops > 0);
    }
    let csv = bench_csv(&rows);
    assert_eq!(csv.lines().next(), Some(BENCH_HEADER));
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn global_mode_is_guarded() {
    let cfg = BenchConfig {
        sizes: vec![33],
        windows: vec![3],
        repeats: 1,
        d_proj: 2,
        mlp_hidden: 2,
        seed: 0,
    };
    let rows = run_bench(&cfg).unwrap();
    assert!(rows.iter().all(|r| r.mode == BenchMode::Local));
    assert!(run_bench(&BenchConfig { repeats: 0, ..cfg }).is_err());
}
