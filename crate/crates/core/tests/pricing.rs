use proptest::prelude::*;

use stochastica::pricing::{
    bs_greeks_for, bs_price, bs_price_moneyness, fd_greeks, BSParams, OptionKind,
};

fn params() -> impl Strategy<Value = BSParams> {
    (
        50.0f64..150.0,
        50.0f64..150.0,
        -0.02f64..0.1,
        0.05f64..0.8,
        0.05f64..3.0,
    )
        .prop_map(|(s, k, r, sigma, t)| BSParams::new(s, k, r, sigma, t).unwrap())
}

proptest! {
    #[test]
    fn put_call_parity(p in params()) {
        let call = bs_price(&p, OptionKind::Call).unwrap();
        let put = bs_price(&p, OptionKind::Put).unwrap();
        prop_assert!((call - put - (p.s - p.discounted_strike())).abs() <= 1e-12 * p.s);
    }

    #[test]
    fn price_respects_no_arbitrage_bounds(p in params()) {
        let call = bs_price(&p, OptionKind::Call).unwrap();
        prop_assert!(call >= (p.s - p.discounted_strike()).max(0.0) && call <= p.s);
    }

    #[test]
    fn call_is_monotone(p in params(), dk in 0.1f64..10.0, dv in 0.01f64..0.2, ds in 0.1f64..10.0) {
        let c = bs_price(&p, OptionKind::Call).unwrap();
        let tol = 1e-12 * p.s;
        let higher_strike = bs_price(&BSParams { k: p.k + dk, ..p }, OptionKind::Call).unwrap();
        let higher_vol = bs_price(&BSParams { sigma: p.sigma + dv, ..p }, OptionKind::Call).unwrap();
        let higher_spot = bs_price(&BSParams { s: p.s + ds, ..p }, OptionKind::Call).unwrap();
        prop_assert!(higher_strike <= c + tol);
        prop_assert!(higher_vol >= c - tol);
        prop_assert!(higher_spot >= c - tol);
    }

    #[test]
    fn moneyness_form_agrees(p in params()) {
        for kind in [OptionKind::Call, OptionKind::Put] {
            let a = bs_price(&p, kind).unwrap();
            let b = bs_price_moneyness(&p, kind).unwrap();
            prop_assert!((a - b).abs() <= 1e-11 * p.s);
        }
    }

    #[test]
    fn density_identity_and_displayed_forms(p in params()) {
        let g = bs_greeks_for(&p, OptionKind::Call).unwrap();
        prop_assert!(g.identity_residual.abs() <= 1e-12 * p.s);
        prop_assert!((g.delta_expanded - g.delta).abs() <= 1e-10);
        prop_assert!((g.kappa_expanded - g.kappa).abs() <= 1e-9 * p.s);
    }

    #[test]
    fn greeks_match_finite_differences(p in params()) {
        for kind in [OptionKind::Call, OptionKind::Put] {
            let g = bs_greeks_for(&p, kind).unwrap();
            let (delta, kappa, gamma) = fd_greeks(&p, kind).unwrap();
            prop_assert!((delta - g.delta).abs() <= 1e-7 * g.delta.abs().max(1e-3));
            prop_assert!((kappa - g.kappa).abs() <= 1e-6 * g.kappa.max(1e-6 * p.s));
            prop_assert!((gamma - g.gamma).abs() <= 1e-6 * g.gamma.max(1e-8));
        }
    }
}
