//! Positions, promises and deterministic present values.
//!
//! Everything here is risk free: cash amounts at known times discounted
//! with a continuously compounded curve.

use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_finite, validation, Result};

/// Exercise-side marker carried by option-like promises. Stored for
/// bookkeeping only; nothing in the engine branches on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optionality {
    #[default]
    None,
    Holder,
    Writer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PositionKind {
    Spot,
    Promise { maturity: f64 },
}

/// A holding of some asset, either outright or as a promise of delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub asset_id: String,
    pub quantity: f64,
    #[serde(flatten)]
    pub kind: PositionKind,
    #[serde(default)]
    pub optionality: Optionality,
}

impl Position {
    pub fn spot(asset_id: impl Into<String>, quantity: f64) -> Result<Self> {
        ensure_finite("quantity", quantity)?;
        Ok(Self {
            asset_id: asset_id.into(),
            quantity,
            kind: PositionKind::Spot,
            optionality: Optionality::None,
        })
    }

    pub fn promise(asset_id: impl Into<String>, quantity: f64, maturity: f64) -> Result<Self> {
        ensure_finite("quantity", quantity)?;
        ensure_finite("maturity", maturity)?;
        if maturity < 0.0 {
            return Err(domain(format!(
                "promise maturity must be >= 0, got {maturity}"
            )));
        }
        Ok(Self {
            asset_id: asset_id.into(),
            quantity,
            kind: PositionKind::Promise { maturity },
            optionality: Optionality::None,
        })
    }

    pub fn with_optionality(mut self, optionality: Optionality) -> Self {
        self.optionality = optionality;
        self
    }

    pub fn maturity(&self) -> Option<f64> {
        match self.kind {
            PositionKind::Spot => None,
            PositionKind::Promise { maturity } => Some(maturity),
        }
    }
}

/// An amount of numeraire paid at `time` years from valuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cashflow {
    pub amount: f64,
    #[serde(rename = "t")]
    pub time: f64,
}

impl Cashflow {
    pub fn new(amount: f64, time: f64) -> Result<Self> {
        ensure_finite("cashflow amount", amount)?;
        ensure_finite("cashflow time", time)?;
        if time < 0.0 {
            return Err(domain(format!("cashflow time must be >= 0, got {time}")));
        }
        Ok(Self { amount, time })
    }
}

/// Piecewise-constant, continuously compounded short rate.
///
/// `rates[i]` applies on `[starts[i], starts[i+1])`; the first rate also
/// covers `[0, starts[0])` and the last one extends to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CurvePoint>", into = "Vec<CurvePoint>")]
pub struct DiscountCurve {
    starts: Vec<f64>,
    rates: Vec<f64>,
    // integral of r from 0 to starts[i]
    cumulative: Vec<f64>,
}

/// One knot of a curve in its JSON form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub r: f64,
}

impl DiscountCurve {
    pub fn flat(rate: f64) -> Result<Self> {
        Self::piecewise(&[CurvePoint { t: 0.0, r: rate }])
    }

    pub fn piecewise(points: &[CurvePoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(validation("discount curve needs at least one point"));
        }
        let mut starts = Vec::with_capacity(points.len());
        let mut rates = Vec::with_capacity(points.len());
        for p in points {
            ensure_finite("curve time", p.t)?;
            ensure_finite("curve rate", p.r)?;
            if p.t < 0.0 {
                return Err(domain(format!("curve knot time must be >= 0, got {}", p.t)));
            }
            if let Some(&last) = starts.last() {
                if p.t <= last {
                    return Err(validation("curve knot times must be strictly increasing"));
                }
            }
            starts.push(p.t);
            rates.push(p.r);
        }
        let mut cumulative = vec![rates[0] * starts[0]];
        for i in 1..starts.len() {
            cumulative.push(cumulative[i - 1] + rates[i - 1] * (starts[i] - starts[i - 1]));
        }
        Ok(Self {
            starts,
            rates,
            cumulative,
        })
    }

    /// The single rate of a flat curve.
    pub fn constant_rate(&self) -> Option<f64> {
        let r0 = self.rates[0];
        self.rates.iter().all(|&r| r == r0).then_some(r0)
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let i = self.starts.partition_point(|&s| s <= t);
        self.rates[i.saturating_sub(1)]
    }

    fn integral_from_zero(&self, t: f64) -> f64 {
        let i = self.starts.partition_point(|&s| s <= t);
        if i == 0 {
            self.rates[0] * t
        } else {
            self.cumulative[i - 1] + self.rates[i - 1] * (t - self.starts[i - 1])
        }
    }

    /// `R(t0, t1)`, the integral of the short rate over `[t0, t1]`.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        if t0 == t1 {
            return 0.0;
        }
        self.integral_from_zero(t1) - self.integral_from_zero(t0)
    }

    /// `exp(-R(t0, t1))`.
    pub fn discount(&self, t0: f64, t1: f64) -> f64 {
        (-self.integral(t0, t1)).exp()
    }

    pub fn points(&self) -> Vec<CurvePoint> {
        self.starts
            .iter()
            .zip(&self.rates)
            .map(|(&t, &r)| CurvePoint { t, r })
            .collect()
    }
}

impl TryFrom<Vec<CurvePoint>> for DiscountCurve {
    type Error = crate::Error;
    fn try_from(points: Vec<CurvePoint>) -> Result<Self> {
        Self::piecewise(&points)
    }
}

impl From<DiscountCurve> for Vec<CurvePoint> {
    fn from(curve: DiscountCurve) -> Self {
        curve.points()
    }
}

/// Continuously compounded equivalent of an annual simple rate.
pub fn annual_to_continuous(annual: f64) -> Result<f64> {
    ensure_finite("annual rate", annual)?;
    if annual <= -1.0 {
        return Err(domain(format!("annual rate must exceed -1, got {annual}")));
    }
    Ok(annual.ln_1p())
}

pub fn continuous_to_annual(rate: f64) -> f64 {
    rate.exp_m1()
}

/// Price at `t` of one unit of numeraire paid at `maturity`.
pub fn zero_coupon_price(curve: &DiscountCurve, t: f64, maturity: f64) -> Result<f64> {
    ensure_finite("t", t)?;
    ensure_finite("maturity", maturity)?;
    if maturity < t {
        return Err(domain(format!(
            "maturity {maturity} precedes valuation time {t}"
        )));
    }
    Ok(curve.discount(t, maturity))
}

/// Terms of a fixed-rate amortising loan paying `coupon` at
/// `interval, 2*interval, ..., N*interval` and `residual` at
/// `maturity = (N+1)*interval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoanTerms {
    pub notional: f64,
    pub residual: f64,
    pub rate: f64,
    pub interval: f64,
    pub maturity: f64,
}

impl LoanTerms {
    /// Number of coupon dates `N = maturity/interval - 1`.
    pub fn coupon_count(&self) -> Result<usize> {
        for (name, v) in [
            ("notional", self.notional),
            ("residual", self.residual),
            ("rate", self.rate),
            ("interval", self.interval),
            ("maturity", self.maturity),
        ] {
            ensure_finite(name, v)?;
        }
        if self.interval <= 0.0 || self.maturity <= self.interval {
            return Err(domain(format!(
                "need maturity > interval > 0, got maturity={} interval={}",
                self.maturity, self.interval
            )));
        }
        let ratio = self.maturity / self.interval;
        let periods = ratio.round();
        if (ratio - periods).abs() > 1e-9 * ratio {
            return Err(domain(format!(
                "maturity/interval = {ratio} is not an integer"
            )));
        }
        Ok(periods as usize - 1)
    }

    /// The dated cash flows seen by the lender: `-notional` at 0, coupons,
    /// then the residual at maturity.
    pub fn schedule(&self, coupon: f64) -> Result<Vec<Cashflow>> {
        let n = self.coupon_count()?;
        let mut flows = vec![Cashflow::new(-self.notional, 0.0)?];
        for k in 1..=n {
            flows.push(Cashflow::new(coupon, k as f64 * self.interval)?);
        }
        flows.push(Cashflow::new(self.residual, self.maturity)?);
        Ok(flows)
    }
}

/// Below this `|r*T|` the zero-rate limit of the coupon formula is used.
const ZERO_RATE_SWITCH: f64 = 1e-10;

/// Coupon that makes the loan worth zero at inception.
pub fn fixed_loan_coupon(terms: &LoanTerms) -> Result<f64> {
    let n = terms.coupon_count()?;
    let LoanTerms {
        notional,
        residual,
        rate,
        interval,
        maturity,
    } = *terms;
    if (rate * maturity).abs() < ZERO_RATE_SWITCH {
        return Ok((notional - residual) / n as f64);
    }
    // (1 - e^{-r dt}) / (e^{-r dt} - e^{-r T}) written with expm1 to avoid
    // cancellation for small rates.
    let numer = -(-rate * interval).exp_m1();
    let denom = -(-rate * interval).exp() * (-rate * (maturity - interval)).exp_m1();
    Ok((notional - residual * (-rate * maturity).exp()) * numer / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Long,
    Short,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Long => 1.0,
            Side::Short => -1.0,
        }
    }
}

/// Value at `t` of a futures position struck at `strike` for delivery at
/// `maturity`: `S - K * P(t, T)` for the long side.
pub fn futures_value(
    side: Side,
    spot: f64,
    strike: f64,
    curve: &DiscountCurve,
    t: f64,
    maturity: f64,
) -> Result<f64> {
    ensure_finite("spot", spot)?;
    ensure_finite("strike", strike)?;
    if spot < 0.0 {
        return Err(domain(format!("spot must be >= 0, got {spot}")));
    }
    let p = zero_coupon_price(curve, t, maturity)?;
    Ok(side.sign() * (spot - strike * p))
}

/// Present value at time 0 of deterministic cash flows.
pub fn pv_deterministic(cashflows: &[Cashflow], curve: &DiscountCurve) -> f64 {
    let terms: Vec<f64> = cashflows
        .iter()
        .map(|c| c.amount * curve.discount(0.0, c.time))
        .collect();
    crate::numerics::pairwise_sum(&terms)
}

/// JSON document holding a curve and a cash-flow schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDocument {
    pub curve: DiscountCurve,
    #[serde(default)]
    pub cashflows: Vec<Cashflow>,
}

impl ScheduleDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScheduleDocument = serde_json::from_str(text)?;
        for c in &doc.cashflows {
            Cashflow::new(c.amount, c.time)?;
        }
        Ok(doc)
    }

    pub fn present_value(&self) -> f64 {
        pv_deterministic(&self.cashflows, &self.curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn annual_to_continuous_examples() {
        assert_eq!(annual_to_continuous(0.0).unwrap(), 0.0);
        assert_relative_eq!(
            annual_to_continuous(std::f64::consts::E - 1.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        // ln(1.1)
        assert_relative_eq!(
            annual_to_continuous(0.10).unwrap(),
            0.095_310_179_804_324_93,
            epsilon = 1e-15
        );
        assert!(annual_to_continuous(-1.0).is_err());
        let r = 0.0371;
        assert_relative_eq!(
            continuous_to_annual(annual_to_continuous(r).unwrap()),
            r,
            epsilon = 1e-16
        );
    }

    #[test]
    fn zero_coupon_examples() {
        let zero = DiscountCurve::flat(0.0).unwrap();
        assert_eq!(zero_coupon_price(&zero, 0.0, 30.0).unwrap(), 1.0);
        let c = DiscountCurve::flat(1.1f64.ln()).unwrap();
        assert_eq!(zero_coupon_price(&c, 3.0, 3.0).unwrap(), 1.0);
        assert_relative_eq!(
            zero_coupon_price(&c, 1.0, 3.0).unwrap(),
            1.0 / 1.21,
            max_relative = 1e-14
        );
        assert!(zero_coupon_price(&c, 2.0, 1.0).is_err());
    }

    #[test]
    fn piecewise_curve_integral() {
        let c = DiscountCurve::piecewise(&[
            CurvePoint { t: 0.0, r: 0.01 },
            CurvePoint { t: 1.0, r: 0.03 },
            CurvePoint { t: 2.5, r: 0.02 },
        ])
        .unwrap();
        assert_relative_eq!(
            c.integral(0.0, 3.0),
            0.01 + 0.045 + 0.01,
            max_relative = 1e-14
        );
        assert_relative_eq!(c.integral(0.5, 2.0), 0.005 + 0.03, max_relative = 1e-14);
        assert_eq!(c.integral(1.7, 1.7), 0.0);
        assert_eq!(c.rate_at(2.5), 0.02);
        assert!(c.constant_rate().is_none());
        assert!(DiscountCurve::piecewise(&[
            CurvePoint { t: 1.0, r: 0.0 },
            CurvePoint { t: 1.0, r: 0.0 }
        ])
        .is_err());
    }

    #[test]
    fn loan_coupon_limits() {
        let mut terms = LoanTerms {
            notional: 100.0,
            residual: 0.0,
            rate: 0.0,
            interval: 1.0,
            maturity: 5.0,
        };
        assert_eq!(fixed_loan_coupon(&terms).unwrap(), 25.0);
        terms.rate = 0.05;
        terms.residual = 100.0 * (0.05f64 * 5.0).exp();
        assert!(fixed_loan_coupon(&terms).unwrap().abs() < 1e-12);
        terms.maturity = 1.0;
        assert!(fixed_loan_coupon(&terms).is_err());
        terms.maturity = 4.5;
        assert!(fixed_loan_coupon(&terms).is_err());
    }

    /// Bisection on the present-value balance, independent of the closed form.
    fn coupon_by_root_find(terms: &LoanTerms) -> f64 {
        let n = terms.coupon_count().unwrap();
        let balance = |c: f64| {
            let mut pv = terms.residual * (-terms.rate * terms.maturity).exp();
            for k in 1..=n {
                pv += c * (-terms.rate * k as f64 * terms.interval).exp();
            }
            pv - terms.notional
        };
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if balance(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn loan_coupon_matches_root_find() {
        let terms = LoanTerms {
            notional: 100.0,
            residual: 0.0,
            rate: 0.05,
            interval: 1.0,
            maturity: 5.0,
        };
        let oracle = coupon_by_root_find(&terms);
        // frozen from the bisection oracle
        assert_relative_eq!(oracle, 28.284_497_920_422_655, max_relative = 1e-10);
        assert_relative_eq!(
            fixed_loan_coupon(&terms).unwrap(),
            oracle,
            max_relative = 1e-12
        );
    }

    #[test]
    fn loan_schedule_has_zero_pv() {
        let terms = LoanTerms {
            notional: 250.0,
            residual: 40.0,
            rate: 0.031,
            interval: 0.25,
            maturity: 3.0,
        };
        let c = fixed_loan_coupon(&terms).unwrap();
        let flows = terms.schedule(c).unwrap();
        let curve = DiscountCurve::flat(terms.rate).unwrap();
        assert!(pv_deterministic(&flows, &curve).abs() < 1e-12 * terms.notional);
    }

    #[test]
    fn futures_examples() {
        let r0 = DiscountCurve::flat(0.0).unwrap();
        let r5 = DiscountCurve::flat(0.05).unwrap();
        assert_eq!(
            futures_value(Side::Long, 80.0, 0.0, &r5, 0.0, 2.0).unwrap(),
            80.0
        );
        assert_eq!(
            futures_value(Side::Long, 95.0, 95.0, &r0, 0.0, 2.0).unwrap(),
            0.0
        );
        let long = futures_value(Side::Long, 100.0, 95.0, &r5, 0.0, 1.0).unwrap();
        assert_relative_eq!(long, 100.0 - 95.0 * (-0.05f64).exp(), max_relative = 1e-15);
        let short = futures_value(Side::Short, 100.0, 95.0, &r5, 0.0, 1.0).unwrap();
        assert_eq!(long, -short);
        assert!(futures_value(Side::Long, 100.0, 95.0, &r5, 1.0, 0.5).is_err());
    }

    #[test]
    fn pv_examples() {
        let c = DiscountCurve::flat(0.04).unwrap();
        assert_eq!(pv_deterministic(&[], &c), 0.0);
        let one = Cashflow::new(1.0, 2.0).unwrap();
        assert_eq!(
            pv_deterministic(&[one], &c),
            zero_coupon_price(&c, 0.0, 2.0).unwrap()
        );
        assert!(Cashflow::new(1.0, -0.1).is_err());
    }

    #[test]
    fn schedule_document_round_trip() {
        let text = r#"{"curve": [{"t": 0, "r": 0.02}, {"t": 1, "r": 0.03}],
                       "cashflows": [{"amount": 5, "t": 0.5}, {"amount": 105, "t": 2}]}"#;
        let doc = ScheduleDocument::from_json(text).unwrap();
        let expect = 5.0 * (-0.01f64).exp() + 105.0 * (-0.05f64).exp();
        assert_relative_eq!(doc.present_value(), expect, max_relative = 1e-14);
        let back: ScheduleDocument =
            serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(back.curve, doc.curve);
        assert!(ScheduleDocument::from_json(r#"{"curve": [], "cashflows": []}"#).is_err());
        assert!(ScheduleDocument::from_json(
            r#"{"curve": [{"t":0,"r":0}], "cashflows": [{"amount":1,"t":-1}]}"#
        )
        .is_err());
    }

    #[test]
    fn positions() {
        let p = Position::promise("gold", 2.0, 1.5)
            .unwrap()
            .with_optionality(Optionality::Holder);
        assert_eq!(p.maturity(), Some(1.5));
        assert!(Position::promise("gold", 2.0, -1.0).is_err());
        assert!(Position::spot("usd", f64::NAN).is_err());
        let json = serde_json::to_string(&p).unwrap();
        let back: Position = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
