//! One-dimensional finite-difference kernels.
//!
//! Both solvers work on an equally spaced coordinate `x`, either the price
//! itself or its logarithm. In log coordinates the model coefficients are
//! mapped by Itô: drift `mu/S - sigma^2/(2 S^2)`, diffusion `sigma^2/(2 S^2)`.

use crate::error::{validation, Error, Result};
use crate::models::ModelSpec;
use crate::numerics::BandedSystem;
use crate::portfolio::DiscountCurve;

/// Scalar drift and volatility `(mu, sigma)` at `(t, S)`.
pub(crate) trait Coefficients: Sync {
    fn mu_sigma(&self, t: f64, s: f64) -> (f64, f64);
}

impl Coefficients for ModelSpec {
    fn mu_sigma(&self, t: f64, s: f64) -> (f64, f64) {
        (self.drift1(t, s), self.vol1(t, s))
    }
}

/// Equally spaced working coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Coord {
    pub log: bool,
    pub x0: f64,
    pub h: f64,
    pub n: usize,
}

impl Coord {
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.h
    }

    pub fn price(&self, x: f64) -> f64 {
        if self.log {
            x.exp()
        } else {
            x
        }
    }

    pub fn s(&self, i: usize) -> f64 {
        self.price(self.x(i))
    }

    /// `(drift, diffusion)` of the working coordinate, diffusion being half
    /// the squared volatility.
    pub fn coefficients(&self, model: &dyn Coefficients, t: f64, x: f64) -> (f64, f64) {
        let s = self.price(x);
        let (mu, sigma) = model.mu_sigma(t, s);
        if self.log {
            let v = sigma / s;
            (mu / s - 0.5 * v * v, 0.5 * v * v)
        } else {
            (mu, 0.5 * sigma * sigma)
        }
    }
}

fn check_coefficients(a: f64, d: f64, t: f64, s: f64) -> Result<()> {
    if !a.is_finite() || !d.is_finite() {
        return Err(Error::NonFiniteCoefficient { t, state: vec![s] });
    }
    Ok(())
}

/// Weight on the left node in the Chang-Cooper flux,
/// `1/(1 - e^{-w}) - 1/w` with `w = B h / C`.
pub(crate) fn chang_cooper_delta(b: f64, c: f64, h: f64) -> f64 {
    if c <= 0.0 {
        return if b >= 0.0 { 1.0 } else { 0.0 };
    }
    let w = b * h / c;
    if w.abs() < 1e-3 {
        0.5 + w / 12.0 - w * w * w / 720.0
    } else if w > 700.0 {
        1.0 - 1.0 / w
    } else if w < -700.0 {
        -1.0 / w
    } else {
        1.0 / -(-w).exp_m1() - 1.0 / w
    }
}

/// Forward operator `L` with `dq/dt = L q` in conservative form; zero flux
/// through both edges. Returns `(lower, diag, upper)`.
pub(crate) fn forward_operator(
    model: &dyn Coefficients,
    coord: &Coord,
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = coord.n;
    let h = coord.h;
    let diff: Vec<f64> = (0..n)
        .map(|i| coord.coefficients(model, t, coord.x(i)).1)
        .collect();
    // J_{i+1/2} = alpha_i q_i + beta_i q_{i+1}
    let mut alpha = vec![0.0; n - 1];
    let mut beta = vec![0.0; n - 1];
    for i in 0..n - 1 {
        let xm = coord.x(i) + 0.5 * h;
        let (a, c) = coord.coefficients(model, t, xm);
        check_coefficients(a, c, t, coord.price(xm))?;
        let b = a - (diff[i + 1] - diff[i]) / h;
        let delta = chang_cooper_delta(b, c, h);
        alpha[i] = b * delta + c / h;
        beta[i] = b * (1.0 - delta) - c / h;
    }
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        if i > 0 {
            lower[i] = alpha[i - 1] / h;
            diag[i] += beta[i - 1] / h;
        }
        if i + 1 < n {
            diag[i] -= alpha[i] / h;
            upper[i] = -beta[i] / h;
        }
    }
    Ok((lower, diag, upper))
}

fn total_variation(q: &[f64]) -> f64 {
    q.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Theta-scheme with `rannacher` leading steps each replaced by two
/// implicit half steps. Yields the state after every full step.
pub(crate) fn forward_march(
    model: &dyn Coefficients,
    coord: &Coord,
    q0: &[f64],
    t0: f64,
    dt: f64,
    n_steps: usize,
    rannacher: usize,
    mut emit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let n = coord.n;
    let mut q = q0.to_vec();
    let tv0 = total_variation(q0).max(f64::MIN_POSITIVE);
    let mut rhs = vec![0.0; n];
    for m in 0..n_steps {
        let t = t0 + m as f64 * dt;
        let substeps: &[(f64, f64)] = if m < rannacher {
            &[(0.0, 0.5), (0.5, 0.5)]
        } else {
            &[(0.0, 1.0)]
        };
        for &(offset, frac) in substeps {
            let ta = t + offset * dt;
            let tb = ta + frac * dt;
            let step = frac * dt;
            let theta = if m < rannacher { 1.0 } else { 0.5 };
            let (lb, db, ub) = forward_operator(model, coord, tb)?;
            if theta < 1.0 {
                let (la, da, ua) = forward_operator(model, coord, ta)?;
                let w = (1.0 - theta) * step;
                for i in 0..n {
                    let mut v = q[i] + w * da[i] * q[i];
                    if i > 0 {
                        v += w * la[i] * q[i - 1];
                    }
                    if i + 1 < n {
                        v += w * ua[i] * q[i + 1];
                    }
                    rhs[i] = v;
                }
            } else {
                rhs.copy_from_slice(&q);
            }
            let w = theta * step;
            let sys = BandedSystem {
                lower: lb.iter().map(|v| -w * v).collect(),
                diag: db.iter().map(|v| 1.0 - w * v).collect(),
                upper: ub.iter().map(|v| -w * v).collect(),
                first_extra: 0.0,
                last_extra: 0.0,
            };
            sys.solve(&mut rhs)
                .map_err(|e| Error::Numerical(e.into()))?;
            q.copy_from_slice(&rhs);
        }
        let tv = total_variation(&q);
        if !tv.is_finite() || tv > 10.0 * tv0 {
            return Err(Error::Unstable {
                growth: tv / tv0,
                suggested_dt: dt / 4.0,
            });
        }
        emit(m + 1, &q);
    }
    Ok(())
}

/// Backward solve of `u_tau = a u_x + D u_xx - r(t) u` from `t_end` back to
/// `t_start`, closing both edges with `u_SS = 0` (linear extrapolation in
/// the price).
pub(crate) fn backward_march(
    model: &dyn Coefficients,
    coord: &Coord,
    terminal: &[f64],
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    discount: Option<&DiscountCurve>,
    rannacher: usize,
) -> Result<Vec<f64>> {
    let n = coord.n;
    if n < 5 {
        return Err(validation("backward solver needs at least five nodes"));
    }
    if n_steps == 0 || !(t_end > t_start) {
        return Err(validation(
            "backward solver needs t_end > t_start and n_steps > 0",
        ));
    }
    let h = coord.h;
    let dt = (t_end - t_start) / n_steps as f64;
    // rows of the edge closures, scaled by h^2
    let (b0, b1, b2) = if coord.log {
        (1.0 + 0.5 * h, -2.0, 1.0 - 0.5 * h)
    } else {
        (1.0, -2.0, 1.0)
    };
    let (e0, e1, e2) = if coord.log {
        (1.0 - 0.5 * h, -2.0, 1.0 + 0.5 * h)
    } else {
        (1.0, -2.0, 1.0)
    };
    // discounting is spatially constant, so it commutes with the operator
    // and is applied exactly after each solve
    let operator = |t: f64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut lo = vec![0.0; n];
        let mut di = vec![0.0; n];
        let mut up = vec![0.0; n];
        for i in 1..n - 1 {
            let (a, d) = coord.coefficients(model, t, coord.x(i));
            check_coefficients(a, d, t, coord.s(i))?;
            lo[i] = -a / (2.0 * h) + d / (h * h);
            di[i] = -2.0 * d / (h * h);
            up[i] = a / (2.0 * h) + d / (h * h);
        }
        Ok((lo, di, up))
    };
    let mut u = terminal.to_vec();
    let mut rhs = vec![0.0; n];
    for m in 0..n_steps {
        // tau runs from 0 at t_end; physical time decreases
        let t_hi = t_end - m as f64 * dt;
        let substeps: &[(f64, f64)] = if m < rannacher {
            &[(0.0, 0.5), (0.5, 0.5)]
        } else {
            &[(0.0, 1.0)]
        };
        for &(offset, frac) in substeps {
            let ta = t_hi - offset * dt;
            let tb = ta - frac * dt;
            let step = frac * dt;
            let theta = if m < rannacher { 1.0 } else { 0.5 };
            let (lb, db, ub) = operator(tb)?;
            if theta < 1.0 {
                let (la, da, ua) = operator(ta)?;
                let w = (1.0 - theta) * step;
                for i in 1..n - 1 {
                    rhs[i] = u[i] + w * (la[i] * u[i - 1] + da[i] * u[i] + ua[i] * u[i + 1]);
                }
            } else {
                rhs[1..n - 1].copy_from_slice(&u[1..n - 1]);
            }
            rhs[0] = 0.0;
            rhs[n - 1] = 0.0;
            let w = theta * step;
            let mut sys = BandedSystem {
                lower: lb.iter().map(|v| -w * v).collect(),
                diag: db.iter().map(|v| 1.0 - w * v).collect(),
                upper: ub.iter().map(|v| -w * v).collect(),
                first_extra: b2,
                last_extra: e2,
            };
            sys.diag[0] = b0;
            sys.upper[0] = b1;
            sys.diag[n - 1] = e0;
            sys.lower[n - 1] = e1;
            sys.solve(&mut rhs)
                .map_err(|e| Error::Numerical(e.into()))?;
            let df = discount.map_or(1.0, |c| c.discount(tb, ta));
            for (ui, ri) in u.iter_mut().zip(&rhs) {
                *ui = df * ri;
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Unstable {
                growth: f64::INFINITY,
                suggested_dt: dt / 4.0,
            });
        }
    }
    Ok(u)
}
