use proptest::prelude::*;

use stochastica::portfolio::{
    annual_to_continuous, continuous_to_annual, fixed_loan_coupon, pv_deterministic,
    zero_coupon_price, Cashflow, CurvePoint, LoanTerms,
};
use stochastica::DiscountCurve;

fn curve() -> impl Strategy<Value = DiscountCurve> {
    prop::collection::vec((0.1f64..2.0, -0.02f64..0.12), 1..6).prop_map(|knots| {
        let mut t = 0.0;
        let points: Vec<CurvePoint> = knots
            .into_iter()
            .map(|(gap, r)| {
                let p = CurvePoint { t, r };
                t += gap;
                p
            })
            .collect();
        DiscountCurve::piecewise(&points).unwrap()
    })
}

proptest! {
    #[test]
    fn zero_coupon_prices_compose(c in curve(), a in 0.0f64..4.0, ab in 0.0f64..5.0, bc in 0.0f64..5.0) {
        let (b, end) = (a + ab, a + ab + bc);
        let direct = zero_coupon_price(&c, a, end).unwrap();
        let composed = zero_coupon_price(&c, a, b).unwrap() * zero_coupon_price(&c, b, end).unwrap();
        prop_assert!((composed - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn fixed_coupon_balances_the_loan(
        notional in 1e2f64..1e7,
        residual_share in 0.0f64..1.0,
        rate in -0.02f64..0.2,
        interval in prop::sample::select(vec![1.0 / 12.0, 0.25, 0.5, 1.0]),
        periods in 2usize..60,
    ) {
        let terms = LoanTerms {
            notional,
            residual: residual_share * notional,
            rate,
            interval,
            maturity: periods as f64 * interval,
        };
        let coupon = fixed_loan_coupon(&terms).unwrap();
        let pv = pv_deterministic(&terms.schedule(coupon).unwrap(), &DiscountCurve::flat(rate).unwrap());
        prop_assert!(pv.abs() <= 1e-12 * notional, "pv {pv}");
    }

    #[test]
    fn present_value_is_additive(
        c in curve(),
        a in prop::collection::vec((-1e4f64..1e4, 0.0f64..10.0), 0..8),
        b in prop::collection::vec((-1e4f64..1e4, 0.0f64..10.0), 0..8),
    ) {
        let flows = |v: &[(f64, f64)]| v.iter().map(|&(x, t)| Cashflow::new(x, t).unwrap()).collect::<Vec<_>>();
        let (fa, fb) = (flows(&a), flows(&b));
        let both: Vec<Cashflow> = fa.iter().chain(&fb).cloned().collect();
        let scale: f64 = both.iter().map(|f| f.amount.abs()).sum::<f64>().max(1.0);
        let gap = pv_deterministic(&both, &c) - pv_deterministic(&fa, &c) - pv_deterministic(&fb, &c);
        prop_assert!(gap.abs() <= 1e-13 * scale);
    }

    #[test]
    fn rate_conventions_round_trip(annual in -0.5f64..1.0) {
        let r = annual_to_continuous(annual).unwrap();
        prop_assert!((continuous_to_annual(r) - annual).abs() <= 1e-14);
    }
}
