use proptest::prelude::*;

use stochastica::pricing::{bs_greeks_for, bs_price, BSParams, OptionKind};
use stochastica::risk::{
    delta_hedge, index_weights, neutralize, portfolio_variance, Greek, IndexInputs,
    InstrumentGreeks, Normalization,
};

fn inputs() -> impl Strategy<Value = IndexInputs> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(0.1f64..5.0, n),
            prop::collection::vec(0.02f64..1.0, n),
        )
            .prop_map(|(x, sigma)| IndexInputs { x, sigma })
    })
}

proptest! {
    #[test]
    fn index_weights_are_stationary(inp in inputs()) {
        let w = index_weights(&inp).unwrap();
        // d/dw_i of the Lagrangian: 2 w_i x_i^2 sigma_i^2 = lambda x_i
        for i in 0..inp.x.len() {
            let grad = 2.0 * w.weights[i] * inp.x[i] * inp.sigma[i].powi(2);
            prop_assert!((grad - w.lagrange_multiplier).abs() <= 1e-12 * w.lagrange_multiplier);
        }
        let budget: f64 = w.weights.iter().zip(&inp.x).map(|(w, x)| w * x).sum();
        prop_assert!((budget - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn effective_variance_obeys_the_harmonic_law(inp in inputs()) {
        let w = index_weights(&inp).unwrap();
        let harmonic: f64 = inp.sigma.iter().map(|s| s.powi(-2)).sum();
        prop_assert!((w.effective_variance * harmonic - 1.0).abs() <= 1e-12);
        let direct = portfolio_variance(&w.weights, &inp.x, &inp.sigma).unwrap();
        prop_assert!((direct - w.effective_variance).abs() <= 1e-12 * w.effective_variance);
    }

    #[test]
    fn neutralized_greeks_vanish(
        raw in prop::collection::vec((0.0f64..1.0, 0.1f64..50.0, 1e-4f64..0.05), 3..6),
        both in any::<bool>(),
    ) {
        let greeks: Vec<InstrumentGreeks> = raw.iter().map(|&(delta, kappa, gamma)| InstrumentGreeks { delta, kappa, gamma }).collect();
        let targets: &[Greek] = if both { &[Greek::Kappa, Greek::Gamma] } else { &[Greek::Gamma] };
        match neutralize(&greeks, targets, &Normalization::FirstUnit) {
            Ok(h) => {
                let sum = |f: fn(&InstrumentGreeks) -> f64| h.weights.iter().zip(&greeks).map(|(a, g)| a * f(g)).sum::<f64>();
                prop_assert!(sum(|g| g.gamma).abs() <= 1e-10);
                if both {
                    prop_assert!(sum(|g| g.kappa).abs() <= 1e-10 * 50.0);
                }
                prop_assert!((sum(|g| g.delta) - h.delta).abs() <= 1e-12 * (1.0 + h.delta.abs()));
                prop_assert_eq!(h.weights[0], 1.0);
            }
            // random rows may be nearly parallel; the error must then be a numerical one
            Err(e) => prop_assert!(!e.is_input_error(), "{e}"),
        }
    }

    #[test]
    fn numerical_delta_hedge_matches_the_analytic_delta(
        s in 60.0f64..140.0, k in 60.0f64..140.0, sigma in 0.1f64..0.6, t in 0.1f64..2.0,
    ) {
        let p = BSParams::new(s, k, 0.03, sigma, t).unwrap();
        let h = delta_hedge(|x| bs_price(&BSParams { s: x, ..p }, OptionKind::Call).unwrap(), s).unwrap();
        let want = bs_greeks_for(&p, OptionKind::Call).unwrap().delta;
        prop_assert!((h.delta - want).abs() <= 1e-6 * want.max(1e-3));
        prop_assert!(h.residual.abs() <= 1e-6);
        prop_assert!(h.warning.is_none());
    }
}
