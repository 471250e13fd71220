//! Probability densities of one-dimensional prices.
//!
//! Closed forms for the solved models, the change-of-variables rule, the
//! forward (Fokker-Planck) and backward (Kolmogorov) finite-difference
//! solvers and the composition rule for transition densities.

pub(crate) mod pde;

use std::io::Write;

use serde::Serialize;

use crate::error::{domain, ensure_finite, validation, Error, Result};
use crate::mc::TimeGrid;
use crate::models::{Dynamics, Matrix, ModelSpec};
use crate::numerics::{fmt17, interp_cubic, interp_linear, linspace, pairwise_sum, trapezoid};
use crate::special::{norm_cdf, norm_pdf};
use pde::Coord;

/// Tolerated deviation of a density's trapezoid mass from one.
pub const MASS_TOLERANCE: f64 = 1e-3;

/// Node layout of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Uniform,
    /// Equal steps in `ln S`.
    Logarithmic,
    Irregular,
}

pub fn detect_spacing(s: &[f64]) -> Spacing {
    let n = s.len();
    if n < 3 {
        return Spacing::Uniform;
    }
    let h = (s[n - 1] - s[0]) / (n - 1) as f64;
    let scale = s[0].abs().max(s[n - 1].abs());
    let uniform = (0..n)
        .all(|i| (s[i] - (s[0] + i as f64 * h)).abs() <= 1e-9 * h + 4.0 * f64::EPSILON * scale);
    if uniform {
        return Spacing::Uniform;
    }
    if s[0] > 0.0 {
        let (l0, l1) = (s[0].ln(), s[n - 1].ln());
        let hl = (l1 - l0) / (n - 1) as f64;
        let scale = l0.abs().max(l1.abs());
        if (0..n).all(|i| {
            (s[i].ln() - (l0 + i as f64 * hl)).abs() <= 1e-9 * hl + 8.0 * f64::EPSILON * scale
        }) {
            return Spacing::Logarithmic;
        }
    }
    Spacing::Irregular
}

/// Bookkeeping carried alongside a tabulated density.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DensityMeta {
    pub model_hash: Option<String>,
    /// Standard deviation, in grid cells of the working coordinate, of the
    /// Gaussian that replaced a point-mass initial condition.
    pub regularization_cells: Option<f64>,
    /// Mass removed by clipping small negative values produced by a solver.
    pub clipped_mass: f64,
}

/// Density tabulated on a strictly increasing price grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub s_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub t: f64,
    pub meta: DensityMeta,
}

fn check_nodes(s: &[f64]) -> Result<()> {
    if s.len() < 3 {
        return Err(validation("a grid needs at least three nodes"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(validation("grid nodes must be finite"));
    }
    if s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(validation("grid nodes must be strictly increasing"));
    }
    Ok(())
}

impl DensityGrid {
    pub fn new(s_values: Vec<f64>, p_values: Vec<f64>, t: f64) -> Result<Self> {
        check_nodes(&s_values)?;
        if p_values.len() != s_values.len() {
            return Err(Error::Dimension {
                what: "density values",
                expected: s_values.len(),
                got: p_values.len(),
            });
        }
        if let Some(p) = p_values.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(validation(format!(
                "density values must be finite and >= 0, got {p}"
            )));
        }
        ensure_finite("t", t)?;
        Ok(Self {
            s_values,
            p_values,
            t,
            meta: DensityMeta::default(),
        })
    }

    /// Tabulate a density function on the given nodes.
    pub fn from_fn<D: Density + ?Sized>(s_values: Vec<f64>, t: f64, density: &D) -> Result<Self> {
        let p = s_values.iter().map(|&s| density.pdf(s)).collect();
        Self::new(s_values, p, t)
    }

    /// Point mass at `s0` on the given nodes, regularized as a Gaussian of
    /// one cell standard deviation in the working coordinate (log price for
    /// logarithmic grids) and renormalized to unit trapezoid mass.
    pub fn point_mass(s_values: Vec<f64>, s0: f64, t: f64) -> Result<Self> {
        check_nodes(&s_values)?;
        ensure_finite("s0", s0)?;
        let n = s_values.len();
        if s0 < s_values[0] || s0 > s_values[n - 1] {
            return Err(domain(format!("point mass at {s0} lies outside the grid")));
        }
        let log = detect_spacing(&s_values) == Spacing::Logarithmic;
        let (x, x0): (Vec<f64>, f64) = if log {
            (s_values.iter().map(|s| s.ln()).collect(), s0.ln())
        } else {
            (s_values.clone(), s0)
        };
        let i = x.partition_point(|&v| v <= x0).clamp(1, n - 1);
        let width = x[i] - x[i - 1];
        let mut p: Vec<f64> = x
            .iter()
            .zip(&s_values)
            .map(|(&xi, &si)| {
                let q = norm_pdf((xi - x0) / width) / width;
                if log {
                    q / si
                } else {
                    q
                }
            })
            .collect();
        let mass = trapezoid(&s_values, &p);
        p.iter_mut().for_each(|v| *v /= mass);
        let mut g = Self::new(s_values, p, t)?;
        g.meta.regularization_cells = Some(1.0);
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.s_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_values.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        detect_spacing(&self.s_values)
    }

    /// Trapezoid integral of the density.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.s_values, &self.p_values)
    }

    /// `|mass - 1|`; within [`MASS_TOLERANCE`] for a valid density.
    pub fn mass_defect(&self) -> f64 {
        (self.mass() - 1.0).abs()
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let y: Vec<f64> = self
            .s_values
            .iter()
            .zip(&self.p_values)
            .map(|(&s, &p)| f(s) * p)
            .collect();
        trapezoid(&self.s_values, &y)
    }

    pub fn mean(&self) -> f64 {
        self.expect(|s| s) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expect(|s| (s - m) * (s - m)) / self.mass()
    }

    /// Trapezoid L1 distance to a reference density on this grid.
    pub fn l1_error<D: Density + ?Sized>(&self, reference: &D) -> f64 {
        let d: Vec<f64> = self
            .s_values
            .iter()
            .zip(&self.p_values)
            .map(|(&s, &p)| (p - reference.pdf(s)).abs())
            .collect();
        trapezoid(&self.s_values, &d)
    }

    /// Probability mass on the cell containing `s0` plus `cells` cells on
    /// either side.
    pub fn mass_near(&self, s0: f64, cells: usize) -> f64 {
        let n = self.len();
        let i = self.s_values.partition_point(|&v| v <= s0).clamp(1, n - 1);
        let lo = (i - 1).saturating_sub(cells);
        let hi = (i + cells).min(n - 1);
        trapezoid(&self.s_values[lo..=hi], &self.p_values[lo..=hi])
    }

    /// Text table: a `#` header with time, mass and model hash, then
    /// `S,p` rows (or whitespace separated for plotting tools).
    pub fn write_table<W: Write>(&self, mut w: W, separator: &str) -> Result<()> {
        writeln!(
            w,
            "# t={} mass={} model={}",
            fmt17(self.t),
            fmt17(self.mass()),
            self.meta.model_hash.as_deref().unwrap_or("none")
        )?;
        writeln!(w, "S{separator}p")?;
        for (s, p) in self.s_values.iter().zip(&self.p_values) {
            writeln!(w, "{}{separator}{}", fmt17(*s), fmt17(*p))?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_table(w, ",")
    }
}

/// Anything that can be evaluated as a density per unit of its argument.
pub trait Density {
    fn pdf(&self, x: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Density for F {
    fn pdf(&self, x: f64) -> f64 {
        self(x)
    }
}

/// Linear interpolation between nodes, zero outside the grid.
impl Density for DensityGrid {
    fn pdf(&self, x: f64) -> f64 {
        let n = self.len();
        if x < self.s_values[0] || x > self.s_values[n - 1] {
            return 0.0;
        }
        interp_linear(&self.s_values, &self.p_values, x)
    }
}

/// Closed-form densities of the solved models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticDensity {
    Normal {
        mean: f64,
        variance: f64,
    },
    /// `ln(S / scale)` is normal with the given log-mean and log-variance.
    LogNormal {
        scale: f64,
        log_mean: f64,
        log_variance: f64,
    },
    /// All mass at one point (zero elapsed time or zero volatility).
    PointMass {
        at: f64,
    },
}

impl AnalyticDensity {
    pub fn is_point_mass(&self) -> bool {
        matches!(self, AnalyticDensity::PointMass { .. })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            AnalyticDensity::Normal { mean, .. } => mean,
            AnalyticDensity::LogNormal {
                scale,
                log_mean,
                log_variance,
            } => scale * (log_mean + 0.5 * log_variance).exp(),
            AnalyticDensity::PointMass { at } => at,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            AnalyticDensity::Normal { variance, .. } => variance,
            AnalyticDensity::LogNormal { log_variance, .. } => {
                let m = self.mean();
                m * m * log_variance.exp_m1()
            }
            AnalyticDensity::PointMass { .. } => 0.0,
        }
    }

    pub fn median(&self) -> f64 {
        match *self {
            AnalyticDensity::Normal { mean, .. } => mean,
            AnalyticDensity::LogNormal {
                scale, log_mean, ..
            } => scale * log_mean.exp(),
            AnalyticDensity::PointMass { at } => at,
        }
    }

    pub fn cdf(&self, s: f64) -> f64 {
        match *self {
            AnalyticDensity::Normal { mean, variance } => norm_cdf((s - mean) / variance.sqrt()),
            AnalyticDensity::LogNormal {
                scale,
                log_mean,
                log_variance,
            } => {
                if s <= 0.0 {
                    0.0
                } else {
                    norm_cdf(((s / scale).ln() - log_mean) / log_variance.sqrt())
                }
            }
            AnalyticDensity::PointMass { at } => {
                if s >= at {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Tabulate on `s_values`; point masses must be regularized through
    /// [`DensityGrid::point_mass`] instead.
    pub fn tabulate(&self, s_values: Vec<f64>, t: f64) -> Result<DensityGrid> {
        if let AnalyticDensity::PointMass { at } = *self {
            return Err(domain(format!(
                "point mass at {at} has no tabulated density"
            )));
        }
        DensityGrid::from_fn(s_values, t, self)
    }
}

/// Point masses evaluate to zero everywhere.
impl Density for AnalyticDensity {
    fn pdf(&self, s: f64) -> f64 {
        match *self {
            AnalyticDensity::Normal { mean, variance } => {
                let sd = variance.sqrt();
                norm_pdf((s - mean) / sd) / sd
            }
            AnalyticDensity::LogNormal {
                scale,
                log_mean,
                log_variance,
            } => {
                if s <= 0.0 {
                    return 0.0;
                }
                let sd = log_variance.sqrt();
                norm_pdf(((s / scale).ln() - log_mean) / sd) / (sd * s)
            }
            AnalyticDensity::PointMass { .. } => 0.0,
        }
    }
}

fn check_density_inputs(t: f64, s0: f64, sigma: f64) -> Result<()> {
    ensure_finite("t", t)?;
    ensure_finite("S0", s0)?;
    ensure_finite("sigma", sigma)?;
    if sigma < 0.0 {
        return Err(domain(format!("volatility must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// Arithmetic Brownian motion after time `t`: normal with mean
/// `S0 + mu t` and variance `sigma^2 t`.
pub fn density_bm(t: f64, s0: f64, mu: f64, sigma: f64) -> Result<AnalyticDensity> {
    check_density_inputs(t, s0, sigma)?;
    ensure_finite("mu", mu)?;
    if t <= 0.0 {
        return Ok(AnalyticDensity::PointMass { at: s0 });
    }
    if sigma == 0.0 {
        return Ok(AnalyticDensity::PointMass { at: s0 + mu * t });
    }
    Ok(AnalyticDensity::Normal {
        mean: s0 + mu * t,
        variance: sigma * sigma * t,
    })
}

/// Geometric Brownian motion after time `t`: lognormal with log-mean
/// `(mu - sigma^2/2) t` and log-variance `sigma^2 t` relative to `S0`.
pub fn density_gbm(t: f64, s0: f64, mu: f64, sigma: f64) -> Result<AnalyticDensity> {
    check_density_inputs(t, s0, sigma)?;
    ensure_finite("mu", mu)?;
    if s0 <= 0.0 {
        return Err(domain(format!("geometric model needs S0 > 0, got {s0}")));
    }
    if t <= 0.0 {
        return Ok(AnalyticDensity::PointMass { at: s0 });
    }
    if sigma == 0.0 {
        return Ok(AnalyticDensity::PointMass {
            at: s0 * (mu * t).exp(),
        });
    }
    Ok(AnalyticDensity::LogNormal {
        scale: s0,
        log_mean: (mu - 0.5 * sigma * sigma) * t,
        log_variance: sigma * sigma * t,
    })
}

/// Mean-reverting Gaussian model after time `t`: normal with mean
/// `S0 e^{-at} + b (1 - e^{-at})` and variance
/// `sigma^2 (1 - e^{-2at}) / (2a)`.
pub fn density_vasicek(t: f64, s0: f64, a: f64, b: f64, sigma: f64) -> Result<AnalyticDensity> {
    check_density_inputs(t, s0, sigma)?;
    ensure_finite("a", a)?;
    ensure_finite("b", b)?;
    if a <= 0.0 {
        return Err(domain(format!("mean-reversion speed must be > 0, got {a}")));
    }
    if t <= 0.0 {
        return Ok(AnalyticDensity::PointMass { at: s0 });
    }
    let e = (-a * t).exp();
    let mean = s0 * e + b * -(-a * t).exp_m1();
    let variance = sigma * sigma * -(-2.0 * a * t).exp_m1() / (2.0 * a);
    if variance == 0.0 {
        return Ok(AnalyticDensity::PointMass { at: mean });
    }
    Ok(AnalyticDensity::Normal { mean, variance })
}

/// Closed-form transition law of a one-dimensional built-in model from
/// `(t0, s0)` to `t`. Risk-neutral geometric models use the integrated
/// short rate as the drift.
pub fn analytic_transition(model: &ModelSpec, t0: f64, s0: f64, t: f64) -> Result<AnalyticDensity> {
    model.require_one_dimensional()?;
    let tau = t - t0;
    match (model.dynamics(), model.risk_neutral_curve()) {
        (Dynamics::Geometric { sigma, .. }, Some(curve)) => {
            if tau <= 0.0 {
                return Ok(AnalyticDensity::PointMass { at: s0 });
            }
            density_gbm(tau, s0, curve.integral(t0, t) / tau, sigma[0])
        }
        (_, Some(_)) => Err(validation("no closed form for this risk-neutral model")),
        (Dynamics::Brownian { mu, sigma }, None) => density_bm(tau, s0, mu[0], sigma[0]),
        (Dynamics::Geometric { mu, sigma }, None) => density_gbm(tau, s0, mu[0], sigma[0]),
        (Dynamics::Vasicek { a, b, sigma }, None) => density_vasicek(tau, s0, a[0], b[0], sigma[0]),
        _ => Err(validation("no closed form for this model")),
    }
}

/// Density of `y = Y(x)` for a strictly monotone map.
#[derive(Debug, Clone)]
pub struct Transformed<D, Yi, J> {
    p_x: D,
    y_inv: Yi,
    dydx: J,
}

impl<D, Yi, J> Density for Transformed<D, Yi, J>
where
    D: Density,
    Yi: Fn(f64) -> f64,
    J: Fn(f64) -> f64,
{
    fn pdf(&self, y: f64) -> f64 {
        let x = (self.y_inv)(y);
        if !x.is_finite() {
            return 0.0;
        }
        let j = (self.dydx)(x).abs();
        if j == 0.0 || !j.is_finite() {
            return 0.0;
        }
        self.p_x.pdf(x) / j
    }
}

/// `p_y(y) = p_x(Y^{-1}(y)) / |Y'(Y^{-1}(y))|`.
///
/// `support` is the interval of `x` on which monotonicity is checked:
/// `dydx` is sampled at 1001 points and must keep one strict sign.
pub fn change_of_variable<D, Yi, J>(
    p_x: D,
    y_inv: Yi,
    dydx: J,
    support: (f64, f64),
) -> Result<Transformed<D, Yi, J>>
where
    D: Density,
    Yi: Fn(f64) -> f64,
    J: Fn(f64) -> f64,
{
    let (lo, hi) = support;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(validation(format!(
            "support must be a finite interval, got ({lo}, {hi})"
        )));
    }
    let mut sign = 0.0;
    for x in linspace(lo, hi, 1001) {
        let d = dydx(x);
        if !d.is_finite() || d == 0.0 {
            return Err(domain(format!(
                "map derivative is {d} at x = {x}; not strictly monotone"
            )));
        }
        if sign == 0.0 {
            sign = d.signum();
        } else if d.signum() != sign {
            return Err(domain(format!(
                "map derivative changes sign near x = {x}; not monotone"
            )));
        }
    }
    Ok(Transformed { p_x, y_inv, dydx })
}

/// Choice of the working coordinate for a grid.
fn working_coord(s: &[f64]) -> Result<Coord> {
    let n = s.len();
    match detect_spacing(s) {
        Spacing::Uniform => Ok(Coord {
            log: false,
            x0: s[0],
            h: (s[n - 1] - s[0]) / (n - 1) as f64,
            n,
        }),
        Spacing::Logarithmic => {
            let (l0, l1) = (s[0].ln(), s[n - 1].ln());
            Ok(Coord {
                log: true,
                x0: l0,
                h: (l1 - l0) / (n - 1) as f64,
                n,
            })
        }
        Spacing::Irregular => Err(validation(
            "finite-difference solvers need uniformly or logarithmically spaced nodes",
        )),
    }
}

/// Default grid for a transition from `(t0, s0)` to `t`: 801 nodes spanning
/// eight instantaneous standard deviations beyond the drifted range, in log
/// price for geometric models.
pub fn default_space_grid(model: &ModelSpec, t0: f64, s0: f64, t: f64) -> Result<Vec<f64>> {
    default_space_grid_with(model, t0, s0, t, 801)
}

pub fn default_space_grid_with(
    model: &ModelSpec,
    t0: f64,
    s0: f64,
    t: f64,
    n: usize,
) -> Result<Vec<f64>> {
    model.require_one_dimensional()?;
    ensure_finite("s0", s0)?;
    let tau = t - t0;
    if !(tau > 0.0) {
        return Err(domain(format!("need t > t0, got t0={t0} t={t}")));
    }
    if n < 5 {
        return Err(validation("need at least five nodes"));
    }
    let log = model.is_positive_process();
    if log && s0 <= 0.0 {
        return Err(domain(format!("geometric model needs S0 > 0, got {s0}")));
    }
    let coord = Coord {
        log,
        x0: if log { s0.ln() } else { s0 },
        h: 1.0,
        n: 1,
    };
    let (a, d) = coord.coefficients(model, t0, coord.x0);
    let sd = (2.0 * d * tau).sqrt();
    if !(sd > 0.0) || !a.is_finite() {
        return Err(domain(
            "default grid needs a positive, finite volatility at S0",
        ));
    }
    let shift = a * tau;
    let lo = coord.x0 + shift.min(0.0) - 8.0 * sd;
    let hi = coord.x0 + shift.max(0.0) + 8.0 * sd;
    let x = linspace(lo, hi, n);
    Ok(if log {
        x.into_iter().map(f64::exp).collect()
    } else {
        x
    })
}

/// Options for the finite-difference solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Number of leading steps replaced by two implicit half steps each.
    pub rannacher_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rannacher_steps: 2 }
    }
}

/// Default time grid for the density solvers: 200 steps.
pub fn default_time_grid(t0: f64, t: f64) -> Result<TimeGrid> {
    TimeGrid::over(t0, t - t0, 200)
}

fn to_working(coord: &Coord, grid: &DensityGrid) -> Vec<f64> {
    grid.p_values
        .iter()
        .zip(&grid.s_values)
        .map(|(&p, &s)| if coord.log { p * s } else { p })
        .collect()
}

fn from_working(coord: &Coord, s: &[f64], q: &[f64], t: f64, meta: &DensityMeta) -> DensityGrid {
    let mut clipped = 0.0;
    let p: Vec<f64> = q
        .iter()
        .zip(s)
        .map(|(&v, &si)| {
            if v < 0.0 {
                clipped -= v * coord.h;
                0.0
            } else if coord.log {
                v / si
            } else {
                v
            }
        })
        .collect();
    let mut meta = meta.clone();
    meta.clipped_mass += clipped;
    DensityGrid {
        s_values: s.to_vec(),
        p_values: p,
        t,
        meta,
    }
}

/// Evolve a density with the Fokker-Planck equation
/// `p_t = -(mu p)_S + (sigma^2 p / 2)_SS`, returning the density after every
/// time step (the first entry is the initial density).
///
/// The scheme is conservative with Chang-Cooper fluxes, zero flux through
/// the edges and Crank-Nicolson steps. Logarithmically spaced grids are
/// solved in `ln S`.
pub fn fokker_planck_forward(
    model: &ModelSpec,
    initial: &DensityGrid,
    grid: &TimeGrid,
) -> Result<Vec<DensityGrid>> {
    fokker_planck_forward_with(model, initial, grid, SolverOptions::default())
}

pub fn fokker_planck_forward_with(
    model: &ModelSpec,
    initial: &DensityGrid,
    grid: &TimeGrid,
    options: SolverOptions,
) -> Result<Vec<DensityGrid>> {
    model.require_one_dimensional()?;
    let coord = working_coord(&initial.s_values)?;
    let q0 = to_working(&coord, initial);
    let peak = q0.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(validation("initial density is identically zero"));
    }
    let edge = q0[0].max(q0[coord.n - 1]);
    if edge > 1e-8 * peak {
        return Err(validation(format!(
            "initial density at the grid edge is {:.3e} of its peak; widen the grid",
            edge / peak
        )));
    }
    let mut meta = initial.meta.clone();
    meta.model_hash = Some(model.hash());
    let mut out = Vec::with_capacity(grid.n_steps + 1);
    out.push(DensityGrid {
        meta: meta.clone(),
        ..initial.clone()
    });
    pde::forward_march(
        model,
        &coord,
        &q0,
        grid.t0,
        grid.dt,
        grid.n_steps,
        options.rannacher_steps,
        |m, q| {
            out.push(from_working(
                &coord,
                &initial.s_values,
                q,
                grid.time(m),
                &meta,
            ))
        },
    )?;
    Ok(out)
}

/// Values of a function on a price grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub s_values: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(s_values: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_nodes(&s_values)?;
        if values.len() != s_values.len() {
            return Err(Error::Dimension {
                what: "grid function values",
                expected: s_values.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("grid function values must be finite"));
        }
        Ok(Self { s_values, values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(s_values: Vec<f64>, f: F) -> Result<Self> {
        let v = s_values.iter().map(|&s| f(s)).collect();
        Self::new(s_values, v)
    }

    /// Cubic interpolation in the grid's own coordinate; `None` outside.
    pub fn at(&self, s: f64) -> Option<f64> {
        let n = self.s_values.len();
        if !(s >= self.s_values[0] && s <= self.s_values[n - 1]) {
            return None;
        }
        if detect_spacing(&self.s_values) == Spacing::Logarithmic && s > 0.0 {
            let x: Vec<f64> = self.s_values.iter().map(|v| v.ln()).collect();
            Some(interp_cubic(&x, &self.values, s.ln()))
        } else {
            Some(interp_cubic(&self.s_values, &self.values, s))
        }
    }
}

/// `u(t0, S0) = E[f(S_t) | S_{t0} = S0]` on the terminal grid, by solving
/// `-u_{t0} = mu u_S + sigma^2 u_SS / 2` backwards with Crank-Nicolson steps
/// and `u_SS = 0` at both edges.
pub fn kolmogorov_backward(
    model: &ModelSpec,
    terminal: &GridFunction,
    t0: f64,
    t: f64,
    n_steps: usize,
) -> Result<GridFunction> {
    kolmogorov_backward_with(model, terminal, t0, t, n_steps, SolverOptions::default())
}

pub fn kolmogorov_backward_with(
    model: &ModelSpec,
    terminal: &GridFunction,
    t0: f64,
    t: f64,
    n_steps: usize,
    options: SolverOptions,
) -> Result<GridFunction> {
    model.require_one_dimensional()?;
    let coord = working_coord(&terminal.s_values)?;
    let u = pde::backward_march(
        model,
        &coord,
        &terminal.values,
        t0,
        t,
        n_steps,
        None,
        options.rannacher_steps,
    )?;
    GridFunction::new(terminal.s_values.clone(), u)
}

/// Transition densities from every node of a source grid to a target grid
/// over `[t_from, t_to]`: `kernel[(i, j)] = P(t_from, source_i; t_to, target_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionFamily {
    pub t_from: f64,
    pub t_to: f64,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub kernel: Matrix,
}

/// One row of a [`TransitionFamily`]: the law of `S_t` given `S_{t0} = s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDensity {
    pub t0: f64,
    pub s0: f64,
    pub density: DensityGrid,
}

impl TransitionFamily {
    /// Tabulate a kernel function `k(source, target)`.
    pub fn from_kernel<K: Fn(f64, f64) -> f64>(
        t_from: f64,
        t_to: f64,
        source: Vec<f64>,
        target: Vec<f64>,
        k: K,
    ) -> Result<Self> {
        check_nodes(&target)?;
        if source.is_empty() {
            return Err(validation(
                "transition family needs at least one source node",
            ));
        }
        let mut kernel = Matrix::zeros(source.len(), target.len());
        for (i, &a) in source.iter().enumerate() {
            for (j, &b) in target.iter().enumerate() {
                let v = k(a, b);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(validation(format!(
                        "kernel value {v} at ({a}, {b}) is not a density"
                    )));
                }
                kernel[(i, j)] = v;
            }
        }
        Ok(Self {
            t_from,
            t_to,
            source,
            target,
            kernel,
        })
    }

    /// Closed-form family of a built-in model.
    pub fn analytic(
        model: &ModelSpec,
        t_from: f64,
        t_to: f64,
        source: Vec<f64>,
        target: Vec<f64>,
    ) -> Result<Self> {
        let laws = source
            .iter()
            .map(|&s| analytic_transition(model, t_from, s, t_to))
            .collect::<Result<Vec<_>>>()?;
        if laws.iter().any(AnalyticDensity::is_point_mass) {
            return Err(domain(
                "transition over a vanishing interval is a point mass",
            ));
        }
        check_nodes(&target)?;
        let mut kernel = Matrix::zeros(source.len(), target.len());
        for (i, law) in laws.iter().enumerate() {
            for (j, &b) in target.iter().enumerate() {
                kernel[(i, j)] = law.pdf(b);
            }
        }
        Ok(Self {
            t_from,
            t_to,
            source,
            target,
            kernel,
        })
    }

    /// Family obtained by running the forward solver from a regularized
    /// point mass at every node of `grid` (source and target coincide).
    pub fn from_forward_solver(model: &ModelSpec, grid: Vec<f64>, time: &TimeGrid) -> Result<Self> {
        let n = grid.len();
        let mut kernel = Matrix::zeros(n, n);
        for i in 0..n {
            let start = DensityGrid::point_mass(grid.clone(), grid[i], time.t0)?;
            let coord = working_coord(&grid)?;
            let q0 = to_working(&coord, &start);
            let mut last = q0.clone();
            pde::forward_march(
                model,
                &coord,
                &q0,
                time.t0,
                time.dt,
                time.n_steps,
                2,
                |_, q| last.copy_from_slice(q),
            )?;
            let row = from_working(&coord, &grid, &last, time.end(), &DensityMeta::default());
            for j in 0..n {
                kernel[(i, j)] = row.p_values[j];
            }
        }
        Ok(Self {
            t_from: time.t0,
            t_to: time.end(),
            source: grid.clone(),
            target: grid,
            kernel,
        })
    }

    pub fn row(&self, i: usize) -> Result<TransitionDensity> {
        let p = (0..self.target.len())
            .map(|j| self.kernel[(i, j)])
            .collect();
        Ok(TransitionDensity {
            t0: self.t_from,
            s0: self.source[i],
            density: DensityGrid::new(self.target.clone(), p, self.t_to)?,
        })
    }

    /// Trapezoid L1 distance between corresponding rows, maximized over the
    /// source nodes.
    pub fn max_row_l1(&self, other: &TransitionFamily) -> Result<f64> {
        check_same(&self.source, &other.source, "source")?;
        check_same(&self.target, &other.target, "target")?;
        let mut worst = 0.0f64;
        for i in 0..self.source.len() {
            let d: Vec<f64> = (0..self.target.len())
                .map(|j| (self.kernel[(i, j)] - other.kernel[(i, j)]).abs())
                .collect();
            worst = worst.max(trapezoid(&self.target, &d));
        }
        Ok(worst)
    }
}

fn check_same(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    let same = a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0));
    if !same {
        return Err(validation(format!("{what} grids do not match")));
    }
    Ok(())
}

/// `P_ac(S', S) = integral dS'' P_ab(S', S'') P_bc(S'', S)` by the trapezoid
/// rule on the shared intermediate grid.
pub fn compose_transition(
    ab: &TransitionFamily,
    bc: &TransitionFamily,
) -> Result<TransitionFamily> {
    check_same(&ab.target, &bc.source, "intermediate")?;
    if (ab.t_to - bc.t_from).abs() > 1e-12 * ab.t_to.abs().max(1.0) {
        return Err(validation(format!(
            "intermediate times differ: {} vs {}",
            ab.t_to, bc.t_from
        )));
    }
    let mid = &ab.target;
    let w: Vec<f64> = {
        let m = mid.len();
        let mut w = vec![0.0; m];
        for k in 0..m - 1 {
            let h = mid[k + 1] - mid[k];
            w[k] += 0.5 * h;
            w[k + 1] += 0.5 * h;
        }
        w
    };
    let (ns, nm, nt) = (ab.source.len(), mid.len(), bc.target.len());
    let mut kernel = Matrix::zeros(ns, nt);
    let mut terms = vec![0.0; nm];
    for i in 0..ns {
        for j in 0..nt {
            for k in 0..nm {
                terms[k] = ab.kernel[(i, k)] * w[k] * bc.kernel[(k, j)];
            }
            kernel[(i, j)] = pairwise_sum(&terms);
        }
    }
    Ok(TransitionFamily {
        t_from: ab.t_from,
        t_to: bc.t_to,
        source: ab.source.clone(),
        target: bc.target.clone(),
        kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_bm, make_gbm, make_vasicek};

    #[test]
    fn bm_variance_example() {
        let d = density_bm(4.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(d.variance(), 1.0);
        assert_eq!(d.mean(), 4.0);
        assert!(density_bm(0.0, 2.0, 1.0, 1.0).unwrap().is_point_mass());
        assert!(density_bm(-1.0, 2.0, 1.0, 1.0).unwrap().is_point_mass());
    }

    #[test]
    fn bm_symmetric_without_drift() {
        let d = density_bm(2.0, 1.5, 0.0, 0.7).unwrap();
        for k in 1..20 {
            let x = 0.1 * k as f64;
            assert!((d.pdf(1.5 + x) - d.pdf(1.5 - x)).abs() <= 1e-15 * d.pdf(1.5 + x));
        }
    }

    #[test]
    fn gbm_median_mean_and_support() {
        let (s0, mu, sigma, t) = (100.0, 0.08, 0.3, 2.0);
        let d = density_gbm(t, s0, mu, sigma).unwrap();
        assert!((d.median() - s0 * ((mu - 0.5 * sigma * sigma) * t).exp()).abs() < 1e-12);
        assert!((d.cdf(d.median()) - 0.5).abs() < 1e-15);
        assert_eq!(d.pdf(0.0), 0.0);
        assert_eq!(d.pdf(-5.0), 0.0);
        let grid = DensityGrid::from_fn(linspace(1e-3, 2000.0, 200_001), t, &d).unwrap();
        assert!((grid.mass() - 1.0).abs() < 1e-6);
        let m = grid.expect(|s| s);
        assert!(((m - s0 * (mu * t).exp()) / (s0 * (mu * t).exp())).abs() < 1e-6);
    }

    #[test]
    fn vasicek_examples() {
        let d = density_vasicek(2f64.ln(), 0.05, 1.0, 0.03, 0.01).unwrap();
        assert!((d.mean() - 0.04).abs() < 1e-15);
        let long = density_vasicek(1e3, 0.05, 1.0, 0.03, 0.01).unwrap();
        assert!((long.mean() - 0.03).abs() < 1e-15);
        assert!((long.variance() - 0.01 * 0.01 / 2.0).abs() < 1e-18);
        let short = density_vasicek(1e-12, 0.05, 1.0, 0.03, 0.01).unwrap();
        assert!((short.mean() - 0.05).abs() < 1e-13);
        assert!(short.variance() < 1e-15);
        assert!(density_vasicek(1.0, 0.05, 0.0, 0.03, 0.01).is_err());
        assert!(density_vasicek(1.0, 0.05, -1.0, 0.03, 0.01).is_err());
    }

    #[test]
    fn linear_change_of_variable() {
        let p = density_bm(1.0, 0.0, 0.0, 1.0).unwrap();
        let q = change_of_variable(p, |y| y / 2.0, |_| 2.0, (-10.0, 10.0)).unwrap();
        let wide = density_bm(1.0, 0.0, 0.0, 2.0).unwrap();
        for k in -30..=30 {
            let y = 0.2 * k as f64;
            assert!((q.pdf(y) - wide.pdf(y)).abs() < 1e-15);
        }
        assert!((q.pdf(0.0) - 0.5 * p.pdf(0.0)).abs() < 1e-15);
    }

    #[test]
    fn log_map_turns_lognormal_into_normal() {
        let (s0, mu, sigma, t) = (50.0, 0.1, 0.25, 1.5);
        let g = density_gbm(t, s0, mu, sigma).unwrap();
        let y = change_of_variable(
            g,
            move |y: f64| s0 * y.exp(),
            move |s: f64| 1.0 / s,
            (1e-6, 1e6),
        )
        .unwrap();
        let b = density_bm(t, 0.0, mu - 0.5 * sigma * sigma, sigma).unwrap();
        for k in -40..=40 {
            let x = 0.05 * k as f64;
            assert!((y.pdf(x) - b.pdf(x)).abs() < 1e-12 * b.pdf(x).max(1.0));
        }
    }

    #[test]
    fn non_monotone_map_rejected() {
        let p = density_bm(1.0, 0.0, 0.0, 1.0).unwrap();
        assert!(change_of_variable(p, |y: f64| y.sqrt(), |x| 2.0 * x, (-1.0, 1.0)).is_err());
    }

    #[test]
    fn spacing_detection() {
        assert_eq!(detect_spacing(&linspace(-1.0, 3.0, 101)), Spacing::Uniform);
        let g: Vec<f64> = linspace(0.0, 2.0, 101).into_iter().map(f64::exp).collect();
        assert_eq!(detect_spacing(&g), Spacing::Logarithmic);
        assert_eq!(detect_spacing(&[0.0, 1.0, 3.0, 4.0]), Spacing::Irregular);
    }

    #[test]
    fn point_mass_concentrates() {
        let s = linspace(-1.0, 1.0, 401);
        let g = DensityGrid::point_mass(s, 0.123, 0.0).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!(g.mass_near(0.123, 3) >= 0.99);
        assert_eq!(g.meta.regularization_cells, Some(1.0));
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(DensityGrid::new(vec![0.0, 1.0, 1.0], vec![0.0; 3], 0.0).is_err());
        assert!(DensityGrid::new(vec![0.0, 1.0, 2.0], vec![0.0, -1.0, 0.0], 0.0).is_err());
        assert!(DensityGrid::new(vec![0.0, 1.0, 2.0], vec![0.0; 2], 0.0).is_err());
    }

    #[test]
    fn heat_kernel_from_gaussian() {
        let sigma = 0.5;
        let init = density_bm(1.0, 0.0, 0.0, 1.0).unwrap();
        let s = linspace(-8.0, 8.0, 801);
        let g0 = DensityGrid::from_fn(s.clone(), 0.0, &init).unwrap();
        let m = make_bm(0.0, sigma).unwrap();
        let out = fokker_planck_forward(&m, &g0, &TimeGrid::over(0.0, 2.0, 100).unwrap()).unwrap();
        let last = out.last().unwrap();
        let want = density_bm(1.0 + 2.0 * sigma * sigma, 0.0, 0.0, 1.0).unwrap();
        assert!(last.l1_error(&want) < 1e-4);
        assert!(last.mass_defect() < 1e-6);
        assert_eq!(out.len(), 101);
    }

    #[test]
    fn backward_constant_and_linear() {
        let m = make_gbm(0.07, 0.3).unwrap();
        let s = default_space_grid(&m, 0.0, 100.0, 1.0).unwrap();
        let one = GridFunction::from_fn(s.clone(), |_| 1.0).unwrap();
        let u = kolmogorov_backward(&m, &one, 0.0, 1.0, 100).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let lin = GridFunction::from_fn(s, |x| x).unwrap();
        let u = kolmogorov_backward(&m, &lin, 0.0, 1.0, 100).unwrap();
        let got = u.at(100.0).unwrap();
        let want = 100.0 * 0.07f64.exp();
        assert!(((got - want) / want).abs() < 1e-4, "{got} vs {want}");
        let b = make_bm(0.3, 1.0).unwrap();
        let s = default_space_grid(&b, 0.0, 2.0, 1.0).unwrap();
        let lin = GridFunction::from_fn(s, |x| x).unwrap();
        let u = kolmogorov_backward(&b, &lin, 0.0, 1.0, 50).unwrap();
        assert!((u.at(2.0).unwrap() - 2.3).abs() < 1e-10);
    }

    #[test]
    fn compose_with_near_delta_is_identity() {
        let s = linspace(-3.0, 3.0, 121);
        let bm = make_bm(0.0, 0.6).unwrap();
        let f = TransitionFamily::analytic(&bm, 0.0, 0.5, s.clone(), s.clone()).unwrap();
        // a kernel one tenth of a cell wide
        let h = s[1] - s[0];
        let w = 0.1 * h;
        let delta = TransitionFamily::from_kernel(0.5, 0.5, s.clone(), s.clone(), |a, b| {
            let z = (b - a) / w;
            if z.abs() < 1.0 {
                (1.0 - z.abs()) / w * w / h
            } else {
                0.0
            }
        })
        .unwrap();
        let c = compose_transition(&f, &delta).unwrap();
        assert!(c.max_row_l1(&f).unwrap() < 0.05);
        let bad =
            TransitionFamily::analytic(&bm, 0.5, 1.0, s.clone(), linspace(-2.0, 2.0, 50)).unwrap();
        assert!(compose_transition(
            &f,
            &TransitionFamily {
                source: linspace(0.0, 1.0, 5),
                ..bad
            }
        )
        .is_err());
    }

    #[test]
    fn vasicek_forward_matches_closed_form() {
        let m = make_vasicek(1.5, 0.04, 0.02).unwrap();
        let s = default_space_grid(&m, 0.0, 0.06, 1.0).unwrap();
        let g0 = DensityGrid::point_mass(s, 0.06, 0.0).unwrap();
        let out = fokker_planck_forward(&m, &g0, &default_time_grid(0.0, 1.0).unwrap()).unwrap();
        let want = density_vasicek(1.0, 0.06, 1.5, 0.04, 0.02).unwrap();
        assert!(out.last().unwrap().l1_error(&want) < 5e-3);
    }
}
