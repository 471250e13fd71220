//! Risk-neutral present values.
//!
//! Four routes to the same number: the closed-form Black-Scholes formula,
//! Monte Carlo over risk-neutral paths, a backward PDE in log price and
//! quadrature against a lattice Green's function.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::pde::{backward_march, Coefficients, Coord};
use crate::error::{domain, ensure_finite, validation, Result};
use crate::mc::{simulate_map, MCEstimate, TimeGrid};
use crate::models::ModelSpec;
use crate::numerics::{gauss5, interp_cubic, interp_linear, pairwise_sum};
use crate::pathintegral::{step_count, GreensFunction};
use crate::portfolio::DiscountCurve;
use crate::rng::NoiseSource;
use crate::special::{norm_cdf, norm_pdf};

pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type StreamFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Payoff paid at expiry as a function of the terminal price.
#[derive(Clone)]
pub enum TerminalPayoff {
    Call {
        strike: f64,
    },
    Put {
        strike: f64,
    },
    /// Pays one when `S > strike`.
    Digital {
        strike: f64,
    },
    Forward {
        strike: f64,
    },
    Constant {
        amount: f64,
    },
    /// Linear interpolation, flat beyond the end nodes.
    Table {
        s: Vec<f64>,
        values: Vec<f64>,
    },
    Custom(TerminalFn),
    /// Weighted sum of payoffs.
    Combination(Vec<(f64, TerminalPayoff)>),
}

impl fmt::Debug for TerminalPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalPayoff::Call { strike } => write!(f, "Call({strike})"),
            TerminalPayoff::Put { strike } => write!(f, "Put({strike})"),
            TerminalPayoff::Digital { strike } => write!(f, "Digital({strike})"),
            TerminalPayoff::Forward { strike } => write!(f, "Forward({strike})"),
            TerminalPayoff::Constant { amount } => write!(f, "Constant({amount})"),
            TerminalPayoff::Table { s, .. } => write!(f, "Table({} nodes)", s.len()),
            TerminalPayoff::Custom(_) => write!(f, "Custom"),
            TerminalPayoff::Combination(parts) => f.debug_list().entries(parts).finish(),
        }
    }
}

impl TerminalPayoff {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            TerminalPayoff::Call { strike } => (s - strike).max(0.0),
            TerminalPayoff::Put { strike } => (strike - s).max(0.0),
            TerminalPayoff::Digital { strike } => {
                if s > *strike {
                    1.0
                } else {
                    0.0
                }
            }
            TerminalPayoff::Forward { strike } => s - strike,
            TerminalPayoff::Constant { amount } => *amount,
            TerminalPayoff::Table { s: nodes, values } => interp_linear(nodes, values, s),
            TerminalPayoff::Custom(f) => f(s),
            TerminalPayoff::Combination(parts) => parts.iter().map(|(w, p)| w * p.value(s)).sum(),
        }
    }

    /// Prices where the payoff or its slope may jump, sorted and unique.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = match self {
            TerminalPayoff::Call { strike }
            | TerminalPayoff::Put { strike }
            | TerminalPayoff::Digital { strike }
            | TerminalPayoff::Forward { strike } => vec![*strike],
            TerminalPayoff::Table { s, .. } => s.clone(),
            TerminalPayoff::Constant { .. } | TerminalPayoff::Custom(_) => Vec::new(),
            TerminalPayoff::Combination(parts) => {
                parts.iter().flat_map(|(_, p)| p.breakpoints()).collect()
            }
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    fn validate(&self) -> Result<()> {
        match self {
            TerminalPayoff::Call { strike }
            | TerminalPayoff::Put { strike }
            | TerminalPayoff::Digital { strike } => {
                ensure_finite("strike", *strike)?;
                if *strike <= 0.0 {
                    return Err(domain(format!("strike must be > 0, got {strike}")));
                }
            }
            TerminalPayoff::Forward { strike } => {
                ensure_finite("strike", *strike)?;
            }
            TerminalPayoff::Constant { amount } => {
                ensure_finite("amount", *amount)?;
            }
            TerminalPayoff::Table { s, values } => {
                if s.len() < 2 || s.len() != values.len() {
                    return Err(validation(
                        "payoff table needs matching s and values with at least two nodes",
                    ));
                }
                if s.iter().chain(values).any(|v| !v.is_finite())
                    || s.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(validation(
                        "payoff table must be finite with increasing nodes",
                    ));
                }
            }
            TerminalPayoff::Custom(_) => {}
            TerminalPayoff::Combination(parts) => {
                for (w, p) in parts {
                    ensure_finite("weight", *w)?;
                    p.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// A terminal payoff at `expiry` plus an optional continuous payment rate
/// `p(t, S)` over `[t0, expiry)`.
#[derive(Clone)]
pub struct PayoffSpec {
    pub terminal: TerminalPayoff,
    pub expiry: f64,
    pub stream: Option<StreamFn>,
}

impl fmt::Debug for PayoffSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PayoffSpec")
            .field("terminal", &self.terminal)
            .field("expiry", &self.expiry)
            .field("stream", &self.stream.is_some())
            .finish()
    }
}

impl PayoffSpec {
    pub fn new(terminal: TerminalPayoff, expiry: f64) -> Result<Self> {
        terminal.validate()?;
        ensure_finite("expiry", expiry)?;
        Ok(Self {
            terminal,
            expiry,
            stream: None,
        })
    }

    pub fn call(strike: f64, expiry: f64) -> Result<Self> {
        Self::new(TerminalPayoff::Call { strike }, expiry)
    }

    pub fn put(strike: f64, expiry: f64) -> Result<Self> {
        Self::new(TerminalPayoff::Put { strike }, expiry)
    }

    pub fn with_stream(mut self, stream: StreamFn) -> Self {
        self.stream = Some(stream);
        self
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.terminal.breakpoints()
    }
}

/// Serializable built-in payoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PayoffConfig {
    Call {
        strike: f64,
        expiry: f64,
    },
    Put {
        strike: f64,
        expiry: f64,
    },
    Digital {
        strike: f64,
        expiry: f64,
    },
    Forward {
        strike: f64,
        expiry: f64,
    },
    Constant {
        amount: f64,
        expiry: f64,
    },
    Table {
        s: Vec<f64>,
        values: Vec<f64>,
        expiry: f64,
    },
}

impl PayoffConfig {
    pub fn to_spec(&self) -> Result<PayoffSpec> {
        let (terminal, expiry) = match self.clone() {
            PayoffConfig::Call { strike, expiry } => (TerminalPayoff::Call { strike }, expiry),
            PayoffConfig::Put { strike, expiry } => (TerminalPayoff::Put { strike }, expiry),
            PayoffConfig::Digital { strike, expiry } => {
                (TerminalPayoff::Digital { strike }, expiry)
            }
            PayoffConfig::Forward { strike, expiry } => {
                (TerminalPayoff::Forward { strike }, expiry)
            }
            PayoffConfig::Constant { amount, expiry } => {
                (TerminalPayoff::Constant { amount }, expiry)
            }
            PayoffConfig::Table { s, values, expiry } => {
                (TerminalPayoff::Table { s, values }, expiry)
            }
        };
        PayoffSpec::new(terminal, expiry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptionKind {
    Call,
    Put,
}

/// Inputs of the Black-Scholes formula; `t` is the time to expiry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BSParams {
    pub s: f64,
    pub k: f64,
    pub r: f64,
    pub sigma: f64,
    pub t: f64,
}

impl BSParams {
    pub fn new(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> Result<Self> {
        let p = Self { s, k, r, sigma, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("S", self.s),
            ("K", self.k),
            ("r", self.r),
            ("sigma", self.sigma),
            ("t", self.t),
        ] {
            ensure_finite(name, v)?;
        }
        if self.s <= 0.0 || self.k <= 0.0 {
            return Err(domain(format!(
                "need S > 0 and K > 0, got S={} K={}",
                self.s, self.k
            )));
        }
        if self.sigma < 0.0 || self.t < 0.0 {
            return Err(domain(format!(
                "need sigma >= 0 and t >= 0, got sigma={} t={}",
                self.sigma, self.t
            )));
        }
        Ok(())
    }

    pub fn discounted_strike(&self) -> f64 {
        self.k * (-self.r * self.t).exp()
    }

    /// True when the formula degenerates to its deterministic limit.
    pub fn is_degenerate(&self) -> bool {
        self.t == 0.0 || self.sigma == 0.0
    }

    /// `d_± = (ln(S/K) + (r ± sigma^2/2) t) / (sigma sqrt(t))`.
    pub fn d_plus_minus(&self) -> Option<(f64, f64)> {
        if self.is_degenerate() {
            return None;
        }
        let z = self.sigma * self.t.sqrt();
        let d_plus =
            ((self.s / self.k).ln() + (self.r + 0.5 * self.sigma * self.sigma) * self.t) / z;
        Some((d_plus, d_plus - z))
    }

    /// Moneyness `m = ln(S / (K e^{-rt}))` and total volatility
    /// `z = sigma sqrt(t)`.
    pub fn moneyness(&self) -> (f64, f64) {
        (
            (self.s / self.k).ln() + self.r * self.t,
            self.sigma * self.t.sqrt(),
        )
    }
}

/// Black-Scholes price. Each flavour is evaluated from its own formula so
/// that a cheap out-of-the-money option keeps full relative precision.
pub fn bs_price(p: &BSParams, kind: OptionKind) -> Result<f64> {
    p.validate()?;
    let dk = p.discounted_strike();
    let (lower, upper) = match kind {
        OptionKind::Call => ((p.s - dk).max(0.0), p.s),
        OptionKind::Put => ((dk - p.s).max(0.0), dk),
    };
    Ok(match (p.d_plus_minus(), kind) {
        (None, _) => lower,
        (Some((dp, dm)), OptionKind::Call) => {
            (p.s * norm_cdf(dp) - dk * norm_cdf(dm)).clamp(lower, upper)
        }
        (Some((dp, dm)), OptionKind::Put) => {
            (dk * norm_cdf(-dm) - p.s * norm_cdf(-dp)).clamp(lower, upper)
        }
    })
}

/// The same price through `f / (K e^{-rt}) = e^m Phi(m/z + z/2) - Phi(m/z - z/2)`.
pub fn bs_price_moneyness(p: &BSParams, kind: OptionKind) -> Result<f64> {
    p.validate()?;
    let dk = p.discounted_strike();
    let (m, z) = p.moneyness();
    let call = if p.is_degenerate() {
        (p.s - dk).max(0.0)
    } else {
        dk * (m.exp() * norm_cdf(m / z + 0.5 * z) - norm_cdf(m / z - 0.5 * z))
    };
    Ok(match kind {
        OptionKind::Call => call,
        OptionKind::Put => call - p.s + dk,
    })
}

/// Sensitivities of a European option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreeksReport {
    /// `df/dS`.
    pub delta: f64,
    /// `df/dsigma`.
    pub kappa: f64,
    /// `d2f/dS2`.
    pub gamma: f64,
    /// Inputs hit the `t = 0` or `sigma = 0` limit; values are the limits
    /// away from the money.
    pub degenerate: bool,
    /// `Phi(d+) + (N(d+) - K e^{-rt} N(d-) / S) / (sigma sqrt t)` before
    /// cancellation.
    pub delta_expanded: f64,
    /// `S N(d+) dd+/dsigma - K e^{-rt} N(d-) dd-/dsigma` before cancellation.
    pub kappa_expanded: f64,
    /// `S N(d+) - K e^{-rt} N(d-)`, zero in exact arithmetic.
    pub identity_residual: f64,
}

/// Closed-form call greeks.
pub fn bs_greeks(p: &BSParams) -> Result<GreeksReport> {
    bs_greeks_for(p, OptionKind::Call)
}

pub fn bs_greeks_for(p: &BSParams, kind: OptionKind) -> Result<GreeksReport> {
    p.validate()?;
    let shift = match kind {
        OptionKind::Call => 0.0,
        OptionKind::Put => -1.0,
    };
    let dk = p.discounted_strike();
    let Some((dp, dm)) = p.d_plus_minus() else {
        let fwd = p.s - dk;
        let delta = if fwd > 0.0 {
            1.0
        } else if fwd < 0.0 {
            0.0
        } else {
            0.5
        };
        let kappa = if fwd == 0.0 && p.t > 0.0 {
            p.s * p.t.sqrt() * norm_pdf(0.0)
        } else {
            0.0
        };
        return Ok(GreeksReport {
            delta: delta + shift,
            kappa,
            gamma: 0.0,
            degenerate: true,
            delta_expanded: delta + shift,
            kappa_expanded: kappa,
            identity_residual: 0.0,
        });
    };
    let sqrt_t = p.t.sqrt();
    let z = p.sigma * sqrt_t;
    let (np, nm) = (norm_pdf(dp), norm_pdf(dm));
    let residual = p.s * np - dk * nm;
    let dd = -((p.s / p.k).ln() + p.r * p.t) / (p.sigma * p.sigma * sqrt_t);
    let (ddp, ddm) = (dd + 0.5 * sqrt_t, dd - 0.5 * sqrt_t);
    Ok(GreeksReport {
        delta: norm_cdf(dp) + shift,
        kappa: p.s * np * sqrt_t,
        gamma: np / (p.s * z),
        degenerate: false,
        delta_expanded: norm_cdf(dp) + (np - dk / p.s * nm) / z + shift,
        kappa_expanded: p.s * ddp * np - dk * ddm * nm,
        identity_residual: residual,
    })
}

/// Fourth-order central finite differences of [`bs_price`] with steps
/// `1e-4 * S` in the spot and `1e-4 * sigma` in the volatility. Returns
/// `(delta, kappa, gamma)`.
///
/// Kappa and gamma agree for calls and puts and the deltas differ by one,
/// so the out-of-the-money flavour is differenced: its small price keeps
/// the rounding in the difference quotients far below the sensitivities.
pub fn fd_greeks(p: &BSParams, kind: OptionKind) -> Result<(f64, f64, f64)> {
    p.validate()?;
    if p.is_degenerate() {
        return Err(domain("finite-difference greeks need sigma > 0 and t > 0"));
    }
    let otm = if p.s < p.discounted_strike() {
        OptionKind::Call
    } else {
        OptionKind::Put
    };
    let shift = match (kind, otm) {
        (OptionKind::Call, OptionKind::Put) => 1.0,
        (OptionKind::Put, OptionKind::Call) => -1.0,
        _ => 0.0,
    };
    let hs = 1e-4 * p.s;
    let hv = 1e-4 * p.sigma;
    let f = |s: f64, sigma: f64| bs_price(&BSParams { s, sigma, ..*p }, otm);
    let spot = [-2.0, -1.0, 0.0, 1.0, 2.0]
        .iter()
        .map(|j| f(p.s + j * hs, p.sigma))
        .collect::<Result<Vec<_>>>()?;
    let vol = [-2.0, -1.0, 1.0, 2.0]
        .iter()
        .map(|j| f(p.s, p.sigma + j * hv))
        .collect::<Result<Vec<_>>>()?;
    let (sm2, sm1, s0, sp1, sp2) = (spot[0], spot[1], spot[2], spot[3], spot[4]);
    let (vm2, vm1, vp1, vp2) = (vol[0], vol[1], vol[2], vol[3]);
    Ok((
        (sm2 - 8.0 * sm1 + 8.0 * sp1 - sp2) / (12.0 * hs) + shift,
        (vm2 - 8.0 * vm1 + 8.0 * vp1 - vp2) / (12.0 * hv),
        (-sm2 + 16.0 * sm1 - 30.0 * s0 + 16.0 * sp1 - sp2) / (12.0 * hs * hs),
    ))
}

/// Replace the drift of a price process by `r(t) S`. Only geometric models
/// qualify; use [`risk_neutralize_forced`] to assert that another model
/// describes a traded price. Idempotent.
pub fn risk_neutralize(model: &ModelSpec, curve: &DiscountCurve) -> Result<ModelSpec> {
    if !model.is_price_homogeneous() {
        return Err(validation(
            "model drift is not proportional to the price; supply an explicit risk-neutral drift \
             (risk_neutralize_forced) to price under it",
        ));
    }
    Ok(model.clone().with_risk_neutral_drift(curve.clone()))
}

/// Like [`risk_neutralize`] but accepts any model, imposing drift `r(t) S`
/// with the model's own volatility.
pub fn risk_neutralize_forced(model: &ModelSpec, curve: &DiscountCurve) -> ModelSpec {
    model.clone().with_risk_neutral_drift(curve.clone())
}

fn ensure_risk_neutral(model: &ModelSpec, curve: &DiscountCurve) -> Result<ModelSpec> {
    match model.risk_neutral_curve() {
        Some(c) if c == curve => Ok(model.clone()),
        _ => risk_neutralize(model, curve),
    }
}

fn check_horizon(t0: f64, expiry: f64) -> Result<()> {
    ensure_finite("t0", t0)?;
    if !(expiry > t0) {
        return Err(domain(format!(
            "expiry {expiry} must be after the valuation time {t0}"
        )));
    }
    Ok(())
}

/// Monte Carlo present value `E[e^{-R(t0,T)} P(S_T) + sum_m e^{-R(t0,t_m)} p(t_m, S_m) dt]`
/// over Euler paths of the risk-neutralized model. `dt` is an upper bound on
/// the step; the horizon is split evenly.
pub fn pv_mc(
    model: &ModelSpec,
    curve: &DiscountCurve,
    payoff: &PayoffSpec,
    t0: f64,
    s0: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MCEstimate> {
    model.require_one_dimensional()?;
    check_horizon(t0, payoff.expiry)?;
    let rn = ensure_risk_neutral(model, curve)?;
    let n_steps = step_count(payoff.expiry - t0, dt)?;
    let grid = TimeGrid::over(t0, payoff.expiry - t0, n_steps)?;
    let dfs: Vec<f64> = (0..=n_steps)
        .map(|m| curve.discount(t0, grid.time(m)))
        .collect();
    let terminal = &payoff.terminal;
    let stream = payoff.stream.as_deref();
    let values = simulate_map(&rn, &[s0], grid, n_paths, NoiseSource::new(seed), |p| {
        let mut v = dfs[n_steps] * terminal.value(p.terminal(0));
        if let Some(rate) = stream {
            let mut acc = 0.0;
            for m in 0..n_steps {
                acc += rate(p.time(m), p.at(m, 0)) * dfs[m];
            }
            v += acc * grid.dt;
        }
        v
    })?;
    Ok(MCEstimate::from_values(&values))
}

/// Volatility `sigma(t, S)` relative to the price.
#[derive(Clone)]
pub enum Volatility {
    Constant(f64),
    Local(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Volatility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Volatility::Constant(v) => write!(f, "Constant({v})"),
            Volatility::Local(_) => write!(f, "Local"),
        }
    }
}

impl Volatility {
    pub fn at(&self, t: f64, s: f64) -> f64 {
        match self {
            Volatility::Constant(v) => *v,
            Volatility::Local(f) => f(t, s),
        }
    }
}

struct RiskNeutralLocalVol<'a> {
    curve: &'a DiscountCurve,
    vol: &'a Volatility,
}

impl Coefficients for RiskNeutralLocalVol<'_> {
    fn mu_sigma(&self, t: f64, s: f64) -> (f64, f64) {
        (self.curve.rate_at(t) * s, self.vol.at(t, s) * s)
    }
}

/// Resolution of the pricing PDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeGrid {
    /// Number of log-price nodes (made odd so that `S0` is a node).
    pub n_nodes: usize,
    pub n_steps: usize,
    /// Half-width of the grid in standard deviations of `ln S_T`.
    pub width_sd: f64,
    pub rannacher_steps: usize,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self {
            n_nodes: 4001,
            n_steps: 1000,
            width_sd: 8.0,
            rannacher_steps: 2,
        }
    }
}

/// Present values at `t0` on the PDE grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeSolution {
    pub t0: f64,
    pub s_values: Vec<f64>,
    pub values: Vec<f64>,
}

impl PdeSolution {
    /// Cubic interpolation in log price; `None` outside the grid.
    pub fn at(&self, s: f64) -> Option<f64> {
        let n = self.s_values.len();
        if !(s >= self.s_values[0] && s <= self.s_values[n - 1]) {
            return None;
        }
        let x: Vec<f64> = self.s_values.iter().map(|v| v.ln()).collect();
        Some(interp_cubic(&x, &self.values, s.ln()))
    }
}

/// Average of `f` over `[a, b]`, split at the given breakpoints.
fn piecewise_integral<F: Fn(f64) -> f64>(a: f64, b: f64, cuts: &[f64], f: F) -> f64 {
    let mut total = 0.0;
    let mut lo = a;
    let start = cuts.partition_point(|&c| c <= a);
    for &c in &cuts[start..] {
        if c >= b {
            break;
        }
        total += gauss5(lo, c, &f);
        lo = c;
    }
    total + gauss5(lo, b, &f)
}

/// Solve the Black-Scholes equation
/// `f_t + r S f_S + sigma^2 S^2 f_SS / 2 = r f` backwards from the terminal
/// payoff, in log price with Crank-Nicolson steps after a Rannacher start.
/// The terminal data are cell averages of the payoff.
pub fn pv_pde(
    payoff: &PayoffSpec,
    curve: &DiscountCurve,
    vol: &Volatility,
    t0: f64,
    s0: f64,
    grid: PdeGrid,
) -> Result<PdeSolution> {
    check_horizon(t0, payoff.expiry)?;
    ensure_finite("S0", s0)?;
    if s0 <= 0.0 {
        return Err(domain(format!("S0 must be > 0, got {s0}")));
    }
    if payoff.stream.is_some() {
        return Err(validation("the PDE route prices terminal payoffs only"));
    }
    if grid.n_nodes < 5 || grid.n_steps == 0 || !(grid.width_sd > 0.0) {
        return Err(validation(
            "PDE grid needs >= 5 nodes, >= 1 step and a positive width",
        ));
    }
    let tau = payoff.expiry - t0;
    let sigma0 = vol.at(t0, s0);
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(domain(format!(
            "volatility at S0 must be > 0, got {sigma0}"
        )));
    }
    let x0 = s0.ln();
    let sd = sigma0 * tau.sqrt();
    let drift = curve.integral(t0, payoff.expiry).abs() + 0.5 * sigma0 * sigma0 * tau;
    let mut half = grid.width_sd * sd + drift;
    for b in payoff.breakpoints() {
        if b > 0.0 {
            half = half.max((b.ln() - x0).abs() + 4.0 * sd);
        }
    }
    let n = grid.n_nodes | 1;
    let c = (n - 1) / 2;
    let h = half / c as f64;
    let coord = Coord {
        log: true,
        x0: x0 - c as f64 * h,
        h,
        n,
    };
    let cuts: Vec<f64> = payoff
        .breakpoints()
        .into_iter()
        .filter(|&b| b > 0.0)
        .map(f64::ln)
        .collect();
    let terminal: Vec<f64> = (0..n)
        .map(|i| {
            let x = coord.x(i);
            piecewise_integral(x - 0.5 * h, x + 0.5 * h, &cuts, |y| {
                payoff.terminal.value(y.exp())
            }) / h
        })
        .collect();
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(validation("payoff is not finite on the PDE grid"));
    }
    let coef = RiskNeutralLocalVol { curve, vol };
    let values = backward_march(
        &coef,
        &coord,
        &terminal,
        t0,
        payoff.expiry,
        grid.n_steps,
        Some(curve),
        grid.rannacher_steps,
    )?;
    Ok(PdeSolution {
        t0,
        s_values: (0..n).map(|i| coord.s(i)).collect(),
        values,
    })
}

/// Result of a Green's-function valuation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenPrice {
    pub value: f64,
    /// Estimated bound on the value carried by the payoff beyond the
    /// lattice.
    pub leakage_bound: f64,
    pub warning: Option<String>,
}

fn green_integral<F: Fn(f64) -> f64>(
    green: &GreensFunction,
    slice: &[f64],
    cuts: &[f64],
    f: F,
) -> (f64, f64) {
    let s = &green.s_values;
    let log = green.is_log();
    let x: Vec<f64> = if log {
        s.iter().map(|v| v.ln()).collect()
    } else {
        s.clone()
    };
    let cuts_x: Vec<f64> = cuts
        .iter()
        .filter(|&&c| !log || c > 0.0)
        .map(|&c| if log { c.ln() } else { c })
        .collect();
    let integrand = |y: f64| {
        let g = interp_cubic(&x, slice, y).max(0.0);
        if log {
            let sv = y.exp();
            g * f(sv) * sv
        } else {
            g * f(y)
        }
    };
    let mut parts = Vec::with_capacity(x.len());
    let mut abs_parts = Vec::with_capacity(x.len());
    for j in 0..x.len() - 1 {
        parts.push(piecewise_integral(x[j], x[j + 1], &cuts_x, integrand));
        abs_parts.push(piecewise_integral(x[j], x[j + 1], &cuts_x, |y| {
            integrand(y).abs()
        }));
    }
    (pairwise_sum(&parts), pairwise_sum(&abs_parts))
}

/// `f = integral G(T, S) P(S) dS` (+ `integral dt integral dS G p(t, S)` for
/// streams), with cubic interpolation of `G` and Gauss-Legendre quadrature on
/// each lattice cell split at the payoff's breakpoints.
pub fn pv_green(green: &GreensFunction, payoff: &PayoffSpec) -> Result<GreenPrice> {
    let horizon = green.horizon();
    if (horizon - payoff.expiry).abs() > 1e-9 * payoff.expiry.abs().max(1.0) {
        return Err(validation(format!(
            "Green's function ends at {horizon} but the payoff expires at {}",
            payoff.expiry
        )));
    }
    let cuts = payoff.breakpoints();
    let terminal = &payoff.terminal;
    let (mut value, mut scale) =
        green_integral(green, green.terminal(), &cuts, |s| terminal.value(s));
    if let Some(rate) = payoff.stream.as_deref() {
        let n = green.values.len();
        let dt = (horizon - green.t0) / n as f64;
        let mut acc = rate(green.t0, green.s0);
        let mut acc_abs = acc.abs();
        for m in 0..n - 1 {
            let tm = green.times[m + 1];
            let (v, a) = green_integral(green, &green.values[m], &[], |s| rate(tm, s));
            acc += v;
            acc_abs += a;
        }
        value += acc * dt;
        scale += acc_abs * dt;
    }
    let s = &green.s_values;
    let n = s.len();
    let g = green.terminal();
    let df = *green.discount_factors.last().expect("at least one slice");
    let (p_lo, p_hi) = (terminal.value(s[0]), terminal.value(s[n - 1]));
    let edge = 0.5
        * ((g[0] * p_lo).abs() * (s[1] - s[0]) + (g[n - 1] * p_hi).abs() * (s[n - 1] - s[n - 2]));
    let leakage_bound = green.leaked * df * p_lo.abs().max(p_hi.abs()) + edge;
    let warning = (leakage_bound > 1e-4 * scale).then(|| {
        format!(
            "payoff mass beyond the lattice may reach {leakage_bound:.3e} ({:.1e} of the payoff mass); widen the lattice",
            leakage_bound / scale
        )
    });
    Ok(GreenPrice {
        value,
        leakage_bound,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_bm, make_gbm};
    use crate::pathintegral::greens_function;

    #[test]
    fn atm_zero_rate_example() {
        let p = BSParams::new(100.0, 100.0, 0.0, 0.2, 1.0).unwrap();
        let v = bs_price(&p, OptionKind::Call).unwrap();
        assert!((v - 100.0 * (2.0 * norm_cdf(0.1) - 1.0)).abs() < 1e-10);
        assert!((v - 7.965_567_455_405_796).abs() < 1e-10);
    }

    #[test]
    fn deterministic_limits() {
        let p = BSParams::new(100.0, 90.0, 0.05, 0.0, 1.0).unwrap();
        let want = 100.0 - 90.0 * (-0.05f64).exp();
        assert!((bs_price(&p, OptionKind::Call).unwrap() - want).abs() < 1e-12);
        let p = BSParams::new(100.0, 110.0, 0.0, 0.3, 0.0).unwrap();
        assert_eq!(bs_price(&p, OptionKind::Call).unwrap(), 0.0);
        assert_eq!(bs_price(&p, OptionKind::Put).unwrap(), 10.0);
        let tiny = BSParams::new(100.0, 90.0, 0.05, 1e-9, 1.0).unwrap();
        assert!((bs_price(&tiny, OptionKind::Call).unwrap() - want).abs() < 1e-9);
        let g = bs_greeks(&p).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.delta, 0.0);
    }

    #[test]
    fn greeks_examples() {
        let deep = BSParams::new(1000.0, 10.0, 0.05, 0.2, 1.0).unwrap();
        assert!((bs_greeks(&deep).unwrap().delta - 1.0).abs() < 1e-15);
        let atm = BSParams::new(100.0, 100.0, 0.0, 0.3, 2.0).unwrap();
        let g = bs_greeks(&atm).unwrap();
        assert!((g.delta - norm_cdf(0.3 * 2f64.sqrt() / 2.0)).abs() < 1e-15);
        let p = BSParams::new(100.0, 100.0, 0.05, 0.2, 1.0).unwrap();
        let g = bs_greeks(&p).unwrap();
        let (_, kappa, _) = fd_greeks(&p, OptionKind::Call).unwrap();
        assert!(((g.kappa - kappa) / g.kappa).abs() < 1e-6);
        assert!((g.delta_expanded - g.delta).abs() < 1e-12);
        assert!((g.kappa_expanded - g.kappa).abs() < 1e-12 * g.kappa);
        let put = bs_greeks_for(&p, OptionKind::Put).unwrap();
        assert!((put.delta - (g.delta - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn risk_neutralize_rules() {
        let curve = DiscountCurve::flat(0.04).unwrap();
        let gbm = make_gbm(0.1, 0.2).unwrap();
        let once = risk_neutralize(&gbm, &curve).unwrap();
        let twice = risk_neutralize(&once, &curve).unwrap();
        assert_eq!(once.hash(), twice.hash());
        assert_eq!(once.drift1(0.0, 50.0), 0.04 * 50.0);
        assert_eq!(once.vol1(0.0, 50.0), 0.2 * 50.0);
        assert!(risk_neutralize(&make_bm(0.0, 1.0).unwrap(), &curve).is_err());
        let forced = risk_neutralize_forced(&make_bm(0.0, 1.0).unwrap(), &curve);
        assert_eq!(forced.drift1(0.0, 2.0), 0.08);
    }

    #[test]
    fn unit_payoff_is_zero_coupon() {
        let curve = DiscountCurve::flat(0.05).unwrap();
        let payoff = PayoffSpec::new(TerminalPayoff::Constant { amount: 1.0 }, 2.0).unwrap();
        let m = make_gbm(0.0, 0.3).unwrap();
        let est = pv_mc(&m, &curve, &payoff, 0.0, 100.0, 0.1, 1000, 3).unwrap();
        assert!((est.mean - (-0.1f64).exp()).abs() < 1e-14);
        assert!(est.std_error < 1e-15);
    }

    #[test]
    fn pde_constant_and_linear_payoffs() {
        let curve = DiscountCurve::flat(0.05).unwrap();
        let vol = Volatility::Constant(0.25);
        let k = PayoffSpec::new(TerminalPayoff::Constant { amount: 100.0 }, 1.0).unwrap();
        let f = pv_pde(&k, &curve, &vol, 0.0, 100.0, PdeGrid::default()).unwrap();
        for v in &f.values {
            assert!((v / (100.0 * (-0.05f64).exp()) - 1.0).abs() < 1e-11);
        }
        let s = PayoffSpec::new(TerminalPayoff::Forward { strike: 0.0 }, 1.0).unwrap();
        let f = pv_pde(&s, &curve, &vol, 0.0, 100.0, PdeGrid::default()).unwrap();
        // cell averages of e^x carry a relative O(h^2 / 24) bias
        assert!((f.at(100.0).unwrap() - 100.0).abs() < 1e-4);
    }

    #[test]
    fn pde_call_matches_formula() {
        let curve = DiscountCurve::flat(0.05).unwrap();
        let payoff = PayoffSpec::call(100.0, 1.0).unwrap();
        let f = pv_pde(
            &payoff,
            &curve,
            &Volatility::Constant(0.2),
            0.0,
            100.0,
            PdeGrid::default(),
        )
        .unwrap();
        let want = bs_price(
            &BSParams::new(100.0, 100.0, 0.05, 0.2, 1.0).unwrap(),
            OptionKind::Call,
        )
        .unwrap();
        assert!(((f.at(100.0).unwrap() - want) / want).abs() < 1e-3);
    }

    #[test]
    fn green_unit_payoff_and_linearity() {
        let curve = DiscountCurve::flat(0.05).unwrap();
        let m = risk_neutralize(&make_gbm(0.0, 0.2).unwrap(), &curve).unwrap();
        let g = greens_function(&m, &curve, 0.0, 100.0, 1.0, 0.05).unwrap();
        let one = PayoffSpec::new(TerminalPayoff::Constant { amount: 1.0 }, 1.0).unwrap();
        let v = pv_green(&g, &one).unwrap();
        assert!((v.value - (-0.05f64).exp()).abs() < 1e-6);
        let c1 = TerminalPayoff::Call { strike: 95.0 };
        let c2 = TerminalPayoff::Put { strike: 105.0 };
        let both = TerminalPayoff::Combination(vec![(2.0, c1.clone()), (-0.5, c2.clone())]);
        let v1 = pv_green(&g, &PayoffSpec::new(c1, 1.0).unwrap())
            .unwrap()
            .value;
        let v2 = pv_green(&g, &PayoffSpec::new(c2, 1.0).unwrap())
            .unwrap()
            .value;
        let v12 = pv_green(&g, &PayoffSpec::new(both, 1.0).unwrap())
            .unwrap()
            .value;
        assert!((v12 - (2.0 * v1 - 0.5 * v2)).abs() < 1e-12 * v12.abs());
    }

    #[test]
    fn payoff_config_round_trip() {
        let cfg: PayoffConfig =
            serde_json::from_str(r#"{"kind":"call","strike":100,"expiry":1}"#).unwrap();
        let spec = cfg.to_spec().unwrap();
        assert_eq!(spec.terminal.value(130.0), 30.0);
        assert!(
            serde_json::from_str::<PayoffConfig>(r#"{"kind":"call","strike":-1,"expiry":1}"#)
                .unwrap()
                .to_spec()
                .is_err()
        );
    }
}
