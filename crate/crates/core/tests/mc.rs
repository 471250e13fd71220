use proptest::prelude::*;

use stochastica::mc::{expectation, simulate_paths};
use stochastica::{make_gbm, make_vasicek, TimeGrid};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn expectation_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let m = make_gbm(0.05, 0.3).unwrap();
        let batch = simulate_paths(&m, &[100.0], TimeGrid::over(0.0, 1.0, 16).unwrap(), 500, seed).unwrap();
        let f = |p: stochastica::mc::PathView<'_>| p.terminal(0);
        let g = |p: stochastica::mc::PathView<'_>| p.at(8, 0).powi(2) / 100.0;
        let combined = expectation(|p| a * f(p) + b * g(p), &batch).mean;
        let separate = a * expectation(f, &batch).mean + b * expectation(g, &batch).mean;
        prop_assert!((combined - separate).abs() <= 1e-12 * (1.0 + combined.abs()) * 100.0);
    }

    #[test]
    fn same_seed_reproduces_the_batch(seed in any::<u64>(), n_paths in 1usize..300, n_steps in 1usize..20) {
        let m = make_vasicek(1.0, 0.05, 0.02).unwrap();
        let grid = TimeGrid::over(0.0, 1.0, n_steps).unwrap();
        let a = simulate_paths(&m, &[0.03], grid, n_paths, seed).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_paths(&m, &[0.03], grid, n_paths, seed).unwrap());
        prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_volatility_paths_are_deterministic(seed in any::<u64>(), mu in -0.2f64..0.2) {
        let m = make_gbm(mu, 0.0).unwrap();
        let grid = TimeGrid::over(0.0, 1.0, 10).unwrap();
        let batch = simulate_paths(&m, &[1.0], grid, 20, seed).unwrap();
        let want = (1.0 + mu * 0.1f64).powi(10);
        prop_assert!(batch.paths().all(|p| (p.terminal(0) - want).abs() <= 1e-14));
    }
}
