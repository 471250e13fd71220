use proptest::prelude::*;

use stochastica::density::{
    change_of_variable, default_space_grid, default_time_grid, density_bm, density_gbm,
    fokker_planck_forward, kolmogorov_backward, Density, DensityGrid, GridFunction,
};
use stochastica::numerics::{linspace, trapezoid};
use stochastica::{make_bm, make_gbm, make_vasicek, ModelSpec, TimeGrid};

fn smooth_start(s: &[f64], centre: f64, width: f64) -> DensityGrid {
    let p: Vec<f64> = s
        .iter()
        .map(|x| (-0.5 * ((x - centre) / width).powi(2)).exp())
        .collect();
    let mass = trapezoid(s, &p);
    DensityGrid::new(s.to_vec(), p.iter().map(|v| v / mass).collect(), 0.0).unwrap()
}

fn model(kind: usize, mu: f64, sigma: f64) -> ModelSpec {
    match kind {
        0 => make_bm(mu, sigma).unwrap(),
        _ => make_vasicek(1.0 + mu.abs(), mu, sigma).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_solver_conserves_mass(kind in 0usize..2, mu in -0.3f64..0.3, sigma in 0.1f64..0.5) {
        let m = model(kind, mu, sigma);
        let s = linspace(-4.0, 4.0, 321);
        let start = smooth_start(&s, 0.0, 0.3);
        let path = fokker_planck_forward(&m, &start, &TimeGrid::over(0.0, 1.0, 50).unwrap()).unwrap();
        for d in &path {
            prop_assert!((d.mass() - 1.0).abs() <= 1e-10 + d.meta.clipped_mass, "mass {}", d.mass());
        }
    }

    /// `int p_T f = int p_0 u(0, .)` where `u` solves the backward equation
    /// with terminal data `f`.
    #[test]
    fn forward_and_backward_solvers_are_dual(
        kind in 0usize..3, mu in -0.3f64..0.3, sigma in 0.1f64..0.5, a in -1.0f64..1.0, b in -1.0f64..1.0,
    ) {
        let (m, s0) = match kind {
            2 => (make_gbm(mu, sigma).unwrap(), 1.0),
            k => (model(k, mu, sigma), 0.0),
        };
        let s = default_space_grid(&m, 0.0, s0, 1.0).unwrap();
        let start = if kind == 2 {
            let p = density_gbm(0.05, s0, 0.0, sigma).unwrap();
            DensityGrid::from_fn(s.clone(), 0.0, &p).unwrap()
        } else {
            smooth_start(&s, s0, 0.2 * sigma)
        };
        let f = |x: f64| 1.0 + (a * x).sin() + b * x;
        let end = fokker_planck_forward(&m, &start, &default_time_grid(0.0, 1.0).unwrap()).unwrap();
        let forward = end.last().unwrap().expect(f);
        let u = kolmogorov_backward(&m, &GridFunction::from_fn(s.clone(), f).unwrap(), 0.0, 1.0, 200).unwrap();
        let backward = start.expect(|x| u.at(x).unwrap());
        prop_assert!((forward - backward).abs() <= 1e-3 * forward.abs().max(backward.abs()), "{forward} vs {backward}");
    }

    #[test]
    fn change_of_variable_round_trips(mu in -1.0f64..1.0, sigma in 0.1f64..1.0, x in -2.0f64..2.0) {
        let p_x = density_bm(1.0, 0.0, mu, sigma).unwrap();
        let p_y = change_of_variable(p_x, |y: f64| y.ln(), |x: f64| x.exp(), (-10.0, 10.0)).unwrap();
        let back = change_of_variable(|y: f64| p_y.pdf(y), |x: f64| x.exp(), |y: f64| 1.0 / y, (1e-4, 1e4)).unwrap();
        let want = p_x.pdf(x);
        prop_assert!((back.pdf(x) - want).abs() <= 1e-9 * want.max(1e-300));
    }

    #[test]
    fn exp_of_normal_is_lognormal(mu in -0.5f64..0.5, sigma in 0.1f64..0.8, y in 0.05f64..5.0) {
        // BM with drift mu - sigma^2/2 exponentiates to GBM with drift mu
        let p_x = density_bm(1.0, 0.0, mu - 0.5 * sigma * sigma, sigma).unwrap();
        let p_y = change_of_variable(p_x, |y: f64| y.ln(), |x: f64| x.exp(), (-10.0, 10.0)).unwrap();
        let want = density_gbm(1.0, 1.0, mu, sigma).unwrap().pdf(y);
        prop_assert!((p_y.pdf(y) - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300);
    }
}

#[test]
fn geometric_forward_solver_conserves_mass() {
    let m = make_gbm(0.1, 0.3).unwrap();
    let s: Vec<f64> = linspace((20.0f64).ln(), (500.0f64).ln(), 301)
        .into_iter()
        .map(f64::exp)
        .collect();
    let start = DensityGrid::point_mass(s.clone(), 100.0, 0.0).unwrap();
    let path = fokker_planck_forward(&m, &start, &TimeGrid::over(0.0, 1.0, 100).unwrap()).unwrap();
    // the solver conserves the cell sum of q = p S in its working coordinate ln S
    let h = (s[s.len() - 1].ln() - s[0].ln()) / (s.len() - 1) as f64;
    let cells = |d: &DensityGrid| h * d.p_values.iter().zip(&s).map(|(p, v)| p * v).sum::<f64>();
    let m0 = cells(&path[0]);
    assert!(path.iter().all(|d| (cells(d) - m0).abs() < 1e-12));
    assert!(path
        .iter()
        .all(|d| (d.mass() - path[0].mass()).abs() < 1e-3));
}
