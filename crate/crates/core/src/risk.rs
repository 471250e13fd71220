//! Risk mitigation: minimum-variance index weights and greek-neutral
//! hedges.

use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_finite, validation, Error, Result};
use crate::numerics::pairwise_sum;
use crate::pricing::{bs_greeks_for, BSParams, OptionKind};

/// Independent assets entering an index: price fractions `x_i = S_i / S_P`
/// and volatilities `sigma_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexInputs {
    pub x: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl IndexInputs {
    pub fn new(x: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let inputs = Self { x, sigma };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(validation("index needs at least one asset"));
        }
        if self.x.len() != self.sigma.len() {
            return Err(Error::Dimension {
                what: "index volatilities",
                expected: self.x.len(),
                got: self.sigma.len(),
            });
        }
        for (&x, &s) in self.x.iter().zip(&self.sigma) {
            ensure_finite("x", x)?;
            ensure_finite("sigma", s)?;
            if x <= 0.0 {
                return Err(domain(format!("price fractions must be > 0, got {x}")));
            }
            if s < 0.0 {
                return Err(domain(format!("volatilities must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexWeights {
    pub weights: Vec<f64>,
    /// `sigma_bar^2 = 1 / sum_i 1 / sigma_i^2`.
    pub effective_variance: f64,
    /// `lambda` in `w_i = lambda / (2 x_i sigma_i^2)`; equals `2 sigma_bar^2`.
    pub lagrange_multiplier: f64,
    /// Some asset is riskless; all weight sits on the riskless assets.
    pub degenerate: bool,
}

/// Minimize `sum_i w_i^2 x_i^2 sigma_i^2` subject to `sum_i w_i x_i = 1`.
/// The optimum is `w_i x_i = sigma_bar^2 / sigma_i^2`.
pub fn index_weights(inputs: &IndexInputs) -> Result<IndexWeights> {
    inputs.validate()?;
    let n = inputs.x.len();
    let riskless: Vec<usize> = (0..n).filter(|&i| inputs.sigma[i] == 0.0).collect();
    if !riskless.is_empty() {
        let share = 1.0 / riskless.len() as f64;
        let mut weights = vec![0.0; n];
        for &i in &riskless {
            weights[i] = share / inputs.x[i];
        }
        return Ok(IndexWeights {
            weights,
            effective_variance: 0.0,
            lagrange_multiplier: 0.0,
            degenerate: true,
        });
    }
    let precision: Vec<f64> = inputs.sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let total = pairwise_sum(&precision);
    let weights = (0..n).map(|i| precision[i] / total / inputs.x[i]).collect();
    let effective_variance = 1.0 / total;
    Ok(IndexWeights {
        weights,
        effective_variance,
        lagrange_multiplier: 2.0 * effective_variance,
        degenerate: false,
    })
}

/// `sum_i w_i^2 x_i^2 sigma_i^2`.
pub fn portfolio_variance(w: &[f64], x: &[f64], sigma: &[f64]) -> Result<f64> {
    if w.len() != x.len() || w.len() != sigma.len() {
        return Err(validation(format!(
            "weights, fractions and volatilities differ in length ({}, {}, {})",
            w.len(),
            x.len(),
            sigma.len()
        )));
    }
    let terms: Vec<f64> = (0..w.len())
        .map(|i| (w[i] * x[i] * sigma[i]).powi(2))
        .collect();
    Ok(pairwise_sum(&terms))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaHedge {
    /// Units of the underlying to short against one unit of the instrument.
    pub delta: f64,
    /// Central-difference slope of `f - delta S` at `S0`.
    pub residual: f64,
    pub warning: Option<String>,
}

/// Hedge ratio `df/dS` at `S0` from a central difference with step
/// `1e-5 S0`. One-sided slopes with step `1e-6 S0` that disagree by more
/// than `1e-3` relative flag a kink.
pub fn delta_hedge<F: Fn(f64) -> f64>(price: F, s0: f64) -> Result<DeltaHedge> {
    ensure_finite("S0", s0)?;
    if s0 <= 0.0 {
        return Err(domain(format!("S0 must be > 0, got {s0}")));
    }
    // round the step so that s0 +- h are exact
    let h = (s0 + 1e-5 * s0) - s0;
    let (up, down) = (price(s0 + h), price(s0 - h));
    let delta = (up - down) / (2.0 * h);
    if !delta.is_finite() {
        return Err(Error::Numerical(format!(
            "price function is not finite near S0={s0}"
        )));
    }
    let residual = ((up - delta * (s0 + h)) - (down - delta * (s0 - h))) / (2.0 * h);
    let hk = (s0 + 1e-6 * s0) - s0;
    let mid = price(s0);
    let right = (price(s0 + hk) - mid) / hk;
    let left = (mid - price(s0 - hk)) / hk;
    let scale = right.abs().max(left.abs());
    let warning = (scale > 0.0 && (right - left).abs() > 1e-3 * scale).then(|| {
        format!("price looks non-differentiable at S0={s0}: one-sided slopes {left:.6e} and {right:.6e}")
    });
    Ok(DeltaHedge {
        delta,
        residual,
        warning,
    })
}

/// Hedge ratio from the closed-form delta.
pub fn delta_hedge_bs(params: &BSParams, kind: OptionKind) -> Result<DeltaHedge> {
    let g = bs_greeks_for(params, kind)?;
    Ok(DeltaHedge {
        delta: g.delta,
        residual: 0.0,
        warning: g
            .degenerate
            .then(|| "degenerate inputs; delta is the deterministic limit".to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentGreeks {
    pub delta: f64,
    pub kappa: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Greek {
    Kappa,
    Gamma,
}

impl Greek {
    fn of(self, g: &InstrumentGreeks) -> f64 {
        match self {
            Greek::Kappa => g.kappa,
            Greek::Gamma => g.gamma,
        }
    }
}

/// How the scale of the hedge weights is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `alpha_1 = 1`.
    #[default]
    FirstUnit,
    /// `sum_i alpha_i v_i = 1` for the given instrument values.
    UnitValue(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PortfolioGreeks {
    /// Net delta after the underlying position.
    pub delta: f64,
    pub kappa: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeReport {
    pub weights: Vec<f64>,
    /// Underlying position `sum_i alpha_i Delta_i` to short.
    pub delta: f64,
    pub residual_greeks: PortfolioGreeks,
    /// Of the row-equilibrated constraint matrix.
    pub condition_number: f64,
}

/// Largest condition number accepted by [`neutralize`].
pub const MAX_CONDITION: f64 = 1e12;

/// Thin SVD `A^T = U diag(s) V^T` of an `m x n` matrix (`m <= n`, rows
/// given) by one-sided Jacobi on the columns of `A^T`. Returns `(U columns,
/// s, V columns)`.
fn svd_rows(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let m = a.len();
    let mut w: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..w[p].len() {
                    let (x, y) = (w[p][k], w[q][k]);
                    w[p][k] = c * x - s * y;
                    w[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = w.iter().map(|col| dot(col, col).sqrt()).collect();
    let u = w
        .into_iter()
        .zip(&s)
        .map(|(col, &sv)| {
            col.into_iter()
                .map(|x| if sv > 0.0 { x / sv } else { 0.0 })
                .collect()
        })
        .collect();
    let v_cols = (0..m).map(|j| (0..m).map(|i| v[i][j]).collect()).collect();
    (u, s, v_cols)
}

/// Weights `alpha` zeroing the targeted greeks of `sum_i alpha_i f_i`, with
/// the delta absorbed by a short position of `sum_i alpha_i Delta_i` in the
/// underlying. Needs one instrument per target plus one for the
/// normalization; with more instruments the minimum-norm weights are
/// returned. The deficient direction of an ill-conditioned system is given
/// over the constraint rows (normalization first, then the targets).
pub fn neutralize(
    instruments: &[InstrumentGreeks],
    targets: &[Greek],
    normalization: &Normalization,
) -> Result<HedgeReport> {
    let n = instruments.len();
    for g in instruments {
        ensure_finite("delta", g.delta)?;
        ensure_finite("kappa", g.kappa)?;
        ensure_finite("gamma", g.gamma)?;
    }
    if (1..targets.len()).any(|i| targets[..i].contains(&targets[i])) {
        return Err(validation("each greek may be targeted once"));
    }
    if n < targets.len() + 1 {
        return Err(validation(format!(
            "neutralizing {} greeks needs at least {} instruments, got {n}",
            targets.len(),
            targets.len() + 1
        )));
    }
    let mut rows = Vec::with_capacity(targets.len() + 1);
    let mut rhs = Vec::with_capacity(targets.len() + 1);
    match normalization {
        Normalization::FirstUnit => {
            let mut row = vec![0.0; n];
            row[0] = 1.0;
            rows.push(row);
        }
        Normalization::UnitValue(values) => {
            if values.len() != n {
                return Err(Error::Dimension {
                    what: "instrument values",
                    expected: n,
                    got: values.len(),
                });
            }
            for &v in values {
                ensure_finite("instrument value", v)?;
            }
            rows.push(values.clone());
        }
    }
    rhs.push(1.0);
    for &t in targets {
        rows.push(instruments.iter().map(|g| t.of(g)).collect());
        rhs.push(0.0);
    }
    // equilibrate rows so that greeks in different units weigh alike
    for (row, b) in rows.iter_mut().zip(rhs.iter_mut()) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
            *b /= norm;
        }
    }
    let (u, s, v) = svd_rows(&rows);
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let (i_min, s_min) = s
        .iter()
        .copied()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (i, x)| if x < acc.1 { (i, x) } else { acc },
        );
    let condition_number = if s_min > 0.0 {
        s_max / s_min
    } else {
        f64::INFINITY
    };
    if !(condition_number <= MAX_CONDITION) {
        return Err(Error::IllConditioned {
            condition_number,
            direction: v[i_min].clone(),
        });
    }
    // alpha = U diag(1/s) V^T b
    let mut weights = vec![0.0; n];
    for j in 0..s.len() {
        let coef = v[j].iter().zip(&rhs).map(|(a, b)| a * b).sum::<f64>() / s[j];
        for (w, uj) in weights.iter_mut().zip(&u[j]) {
            *w += coef * uj;
        }
    }
    // the residuals below are aggregated after this, so they stay honest
    if let Normalization::FirstUnit = normalization {
        weights[0] = 1.0;
    }
    let aggregate = |f: fn(&InstrumentGreeks) -> f64| {
        let terms: Vec<f64> = weights
            .iter()
            .zip(instruments)
            .map(|(a, g)| a * f(g))
            .collect();
        pairwise_sum(&terms)
    };
    let delta = aggregate(|g| g.delta);
    let kappa = aggregate(|g| g.kappa);
    let gamma = aggregate(|g| g.gamma);
    Ok(HedgeReport {
        weights,
        delta,
        residual_greeks: PortfolioGreeks {
            delta: 0.0,
            kappa,
            gamma,
        },
        condition_number,
    })
}
