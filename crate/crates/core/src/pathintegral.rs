//! Lattice path integrals.
//!
//! The one-step Euler law is used as a short-time kernel and iterated by
//! quadrature on a fixed grid. Each kernel row is truncated to eight
//! standard deviations around its drifted centre and renormalized on the
//! grid, so discrete mass is conserved exactly; mass that the untruncated
//! Gaussian would have carried off the grid is tracked separately.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::density::{
    default_space_grid_with, detect_spacing, DensityGrid, Spacing, TransitionFamily,
};
use crate::error::{domain, ensure_finite, validation, Error, Result};
use crate::mc::MCEstimate;
use crate::models::{Matrix, ModelSpec};
use crate::numerics::{fmt17, pairwise_sum};
use crate::portfolio::DiscountCurve;
use crate::rng::NoiseSource;
use crate::special::{norm_cdf, norm_pdf};

const WINDOW_SD: f64 = 8.0;
const MAX_LEAK: f64 = 0.01;
const PI_STREAM: u64 = 0x5041_5448;

/// Variable in which a kernel is Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelCoordinate {
    /// Euler step of the price itself.
    Price,
    /// Euler step of `ln S`, drift `mu/S - sigma^2/(2 S^2)`, volatility
    /// `sigma/S`; only for strictly positive prices.
    Log,
}

/// Law of one step from a given state, in the kernel's coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepLaw {
    Gaussian {
        mean: f64,
        sd: f64,
    },
    /// Zero volatility: the step is the deterministic drift.
    Deterministic {
        to: f64,
    },
}

/// One-step transition `P(t, S -> S')` of the pre-point Euler recursion.
#[derive(Debug, Clone)]
pub struct ShortTimeKernel {
    model: ModelSpec,
    t: f64,
    dt: f64,
    coordinate: KernelCoordinate,
}

/// Euler kernel of the price:
/// `exp(-(S' - S - mu dt)^2 / (2 sigma^2 dt)) / sqrt(2 pi sigma^2 dt)`.
pub fn one_step_kernel(model: &ModelSpec, t: f64, dt: f64) -> Result<ShortTimeKernel> {
    ShortTimeKernel::new(model, t, dt, KernelCoordinate::Price)
}

impl ShortTimeKernel {
    pub fn new(model: &ModelSpec, t: f64, dt: f64, coordinate: KernelCoordinate) -> Result<Self> {
        model.require_one_dimensional()?;
        ensure_finite("t", t)?;
        ensure_finite("dt", dt)?;
        if dt <= 0.0 {
            return Err(domain(format!("time step must be > 0, got {dt}")));
        }
        Ok(Self {
            model: model.clone(),
            t,
            dt,
            coordinate,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn coordinate(&self) -> KernelCoordinate {
        self.coordinate
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// The same kernel anchored at another time.
    pub fn at_time(&self, t: f64) -> Self {
        Self { t, ..self.clone() }
    }

    fn to_working(&self, s: f64) -> f64 {
        match self.coordinate {
            KernelCoordinate::Price => s,
            KernelCoordinate::Log => s.ln(),
        }
    }

    fn from_working(&self, x: f64) -> f64 {
        match self.coordinate {
            KernelCoordinate::Price => x,
            KernelCoordinate::Log => x.exp(),
        }
    }

    /// Step law from `s` at time `t` in the working coordinate.
    pub fn law_at(&self, t: f64, s: f64) -> Result<StepLaw> {
        let mu = self.model.drift1(t, s);
        let sigma = self.model.vol1(t, s);
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFiniteCoefficient { t, state: vec![s] });
        }
        let (x, a, v) = match self.coordinate {
            KernelCoordinate::Price => (s, mu, sigma),
            KernelCoordinate::Log => {
                if s <= 0.0 {
                    return Err(domain(format!("log kernel needs S > 0, got {s}")));
                }
                let v = sigma / s;
                (s.ln(), mu / s - 0.5 * v * v, v)
            }
        };
        let mean = x + a * self.dt;
        if v == 0.0 {
            return Ok(StepLaw::Deterministic { to: mean });
        }
        Ok(StepLaw::Gaussian {
            mean,
            sd: v * self.dt.sqrt(),
        })
    }

    pub fn law(&self, s: f64) -> Result<StepLaw> {
        self.law_at(self.t, s)
    }

    /// Transition density per unit price of `S'`; zero for a degenerate
    /// (zero-volatility) step.
    pub fn pdf(&self, s_from: f64, s_to: f64) -> Result<f64> {
        Ok(match self.law(s_from)? {
            StepLaw::Deterministic { .. } => 0.0,
            StepLaw::Gaussian { mean, sd } => match self.coordinate {
                KernelCoordinate::Price => norm_pdf((s_to - mean) / sd) / sd,
                KernelCoordinate::Log => {
                    if s_to <= 0.0 {
                        0.0
                    } else {
                        norm_pdf((s_to.ln() - mean) / sd) / (sd * s_to)
                    }
                }
            },
        })
    }

    /// Draw `S'` given the standard normal `xi`.
    pub fn sample(&self, t: f64, s: f64, xi: f64) -> Result<f64> {
        Ok(match self.law_at(t, s)? {
            StepLaw::Deterministic { to } => self.from_working(to),
            StepLaw::Gaussian { mean, sd } => self.from_working(mean + sd * xi),
        })
    }

    /// Normalized transition rows on `grid`, as a family over one step.
    pub fn family(&self, grid: &[f64]) -> Result<TransitionFamily> {
        let lattice = Lattice::new(self, grid)?;
        let rows = lattice.rows(self, self.t)?;
        let n = grid.len();
        let mut kernel = Matrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            for (k, v) in row.values.iter().enumerate() {
                let j = row.start + k;
                kernel[(i, j)] = lattice.to_price_density(j, *v);
            }
        }
        Ok(TransitionFamily {
            t_from: self.t,
            t_to: self.t + self.dt,
            source: grid.to_vec(),
            target: grid.to_vec(),
            kernel,
        })
    }
}

/// Grid in the kernel's working coordinate with quadrature weights.
struct Lattice {
    s: Vec<f64>,
    x: Vec<f64>,
    w: Vec<f64>,
    log: bool,
}

/// Sparse normalized kernel row: densities per unit working coordinate at
/// nodes `start..start + values.len()`, plus the fraction of the untruncated
/// law that falls outside the grid.
struct Row {
    start: usize,
    values: Vec<f64>,
    leak: f64,
}

impl Lattice {
    fn new(kernel: &ShortTimeKernel, grid: &[f64]) -> Result<Self> {
        if grid.len() < 3 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(validation(
                "lattice needs at least three strictly increasing nodes",
            ));
        }
        let log = kernel.coordinate == KernelCoordinate::Log;
        if log && grid[0] <= 0.0 {
            return Err(domain("log kernel needs a grid of positive prices"));
        }
        let x: Vec<f64> = grid.iter().map(|&s| kernel.to_working(s)).collect();
        let n = x.len();
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let h = x[i + 1] - x[i];
            w[i] += 0.5 * h;
            w[i + 1] += 0.5 * h;
        }
        Ok(Self {
            s: grid.to_vec(),
            x,
            w,
            log,
        })
    }

    fn to_price_density(&self, j: usize, q: f64) -> f64 {
        if self.log {
            q / self.s[j]
        } else {
            q
        }
    }

    fn row(&self, law: StepLaw) -> Row {
        let n = self.x.len();
        let (lo, hi) = (self.x[0], self.x[n - 1]);
        match law {
            StepLaw::Deterministic { to } => {
                if !(to >= lo && to <= hi) {
                    return Row {
                        start: 0,
                        values: Vec::new(),
                        leak: 1.0,
                    };
                }
                let j = self.x.partition_point(|&v| v <= to).clamp(1, n - 1) - 1;
                let lambda = (to - self.x[j]) / (self.x[j + 1] - self.x[j]);
                Row {
                    start: j,
                    values: vec![(1.0 - lambda) / self.w[j], lambda / self.w[j + 1]],
                    leak: 0.0,
                }
            }
            StepLaw::Gaussian { mean, sd } => {
                let leak = norm_cdf((lo - mean) / sd) + norm_cdf((mean - hi) / sd);
                let a = self.x.partition_point(|&v| v < mean - WINDOW_SD * sd);
                let b = self.x.partition_point(|&v| v <= mean + WINDOW_SD * sd);
                if a >= b {
                    // narrower than a cell: fall back to linear deposition
                    let mut r = self.row(StepLaw::Deterministic {
                        to: mean.clamp(lo, hi),
                    });
                    r.leak = leak;
                    return r;
                }
                let mut values: Vec<f64> = self.x[a..b]
                    .iter()
                    .map(|&x| norm_pdf((x - mean) / sd) / sd)
                    .collect();
                let mass: Vec<f64> = values
                    .iter()
                    .zip(&self.w[a..b])
                    .map(|(v, w)| v * w)
                    .collect();
                let mass = pairwise_sum(&mass);
                if mass > 0.0 {
                    values.iter_mut().for_each(|v| *v /= mass);
                    Row {
                        start: a,
                        values,
                        leak,
                    }
                } else {
                    let mut r = self.row(StepLaw::Deterministic {
                        to: mean.clamp(lo, hi),
                    });
                    r.leak = leak;
                    r
                }
            }
        }
    }

    fn rows(&self, kernel: &ShortTimeKernel, t: f64) -> Result<Vec<Row>> {
        self.s
            .par_iter()
            .map(|&s| kernel.law_at(t, s).map(|law| self.row(law)))
            .collect()
    }

    /// One quadrature step `q'_j = sum_i q_i w_i K_ij`; returns the leaked
    /// fraction of mass.
    fn step(&self, rows: &[Row], q: &[f64], out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut leak = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let m = q[i] * self.w[i];
            if m == 0.0 {
                continue;
            }
            leak += m * row.leak;
            for (k, v) in row.values.iter().enumerate() {
                out[row.start + k] += m * v;
            }
        }
        leak
    }
}

fn time_homogeneous(model: &ModelSpec) -> bool {
    use crate::models::Dynamics;
    let curve_const = model
        .risk_neutral_curve()
        .map_or(true, |c| c.constant_rate().is_some());
    curve_const && !matches!(model.dynamics(), Dynamics::Custom(_))
}

fn kernel_for_grid(kernel: &ShortTimeKernel, grid: &[f64]) -> Result<()> {
    if kernel.coordinate == KernelCoordinate::Log && detect_spacing(grid) != Spacing::Logarithmic {
        return Err(validation("log kernel needs logarithmically spaced nodes"));
    }
    Ok(())
}

/// March a working-coordinate density `q` through `n_steps` kernel steps
/// starting at time `t0`, calling `emit(m, q)` after each step.
fn march(
    kernel: &ShortTimeKernel,
    lattice: &Lattice,
    q0: Vec<f64>,
    t0: f64,
    n_steps: usize,
    first_done: bool,
    mut emit: impl FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, f64)> {
    let mut q = q0;
    let mut next = vec![0.0; q.len()];
    let homogeneous = time_homogeneous(&kernel.model);
    let mut cached: Option<Vec<Row>> = None;
    let mut lost = 0.0;
    let start = usize::from(first_done);
    for m in start..n_steps {
        let t = t0 + m as f64 * kernel.dt;
        let rows = match (&cached, homogeneous) {
            (Some(r), true) => r,
            _ => {
                cached = Some(lattice.rows(kernel, t)?);
                cached.as_ref().expect("rows just built")
            }
        };
        lost += lattice.step(rows, &q, &mut next) * (1.0 - lost);
        if lost > MAX_LEAK {
            return Err(Error::BoundaryLeak {
                lost,
                lo: lattice.s[0],
                hi: lattice.s[lattice.s.len() - 1],
            });
        }
        std::mem::swap(&mut q, &mut next);
        emit(m + 1, &q);
    }
    Ok((q, lost))
}

/// Iterate the kernel `n_steps` times on the grid of `initial`.
pub fn propagate(
    kernel: &ShortTimeKernel,
    initial: &DensityGrid,
    n_steps: usize,
) -> Result<DensityGrid> {
    if n_steps == 0 {
        return Ok(initial.clone());
    }
    kernel_for_grid(kernel, &initial.s_values)?;
    let lattice = Lattice::new(kernel, &initial.s_values)?;
    let q0: Vec<f64> = initial
        .p_values
        .iter()
        .zip(&initial.s_values)
        .map(|(&p, &s)| if lattice.log { p * s } else { p })
        .collect();
    let peak = q0.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(validation("initial density is identically zero"));
    }
    let edge = q0[0].max(q0[q0.len() - 1]);
    if edge > 1e-8 * peak {
        return Err(validation(format!(
            "initial density at the grid edge is {:.3e} of its peak; widen the grid",
            edge / peak
        )));
    }
    let (q, _) = march(kernel, &lattice, q0, initial.t, n_steps, false, |_, _| {})?;
    let p: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(j, &v)| lattice.to_price_density(j, v))
        .collect();
    let mut out = DensityGrid::new(
        initial.s_values.clone(),
        p,
        initial.t + n_steps as f64 * kernel.dt,
    )?;
    out.meta = initial.meta.clone();
    out.meta.model_hash = Some(kernel.model.hash());
    Ok(out)
}

/// Discounted transition densities `G(t_m, S) = e^{-R(t0, t_m)} P(t0, S0; t_m, S)`
/// on a lattice.
#[derive(Debug, Clone, Serialize)]
pub struct GreensFunction {
    pub t0: f64,
    pub s0: f64,
    pub model_hash: String,
    pub times: Vec<f64>,
    pub s_values: Vec<f64>,
    /// `values[m][j]`: per unit price at `times[m + 1]`, `s_values[j]`.
    pub values: Vec<Vec<f64>>,
    pub discount_factors: Vec<f64>,
    /// Fraction of probability the untruncated kernels would have carried
    /// off the lattice (renormalized away).
    pub leaked: f64,
    log: bool,
}

impl GreensFunction {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("at least one slice")
    }

    pub fn terminal(&self) -> &[f64] {
        self.values.last().expect("at least one slice")
    }

    /// Integral of slice `m` over the price, using the lattice quadrature.
    pub fn mass(&self, m: usize) -> f64 {
        let n = self.s_values.len();
        let terms: Vec<f64> = (0..n - 1)
            .map(|j| {
                let (a, b) = (self.s_values[j], self.s_values[j + 1]);
                let (ga, gb) = (self.values[m][j], self.values[m][j + 1]);
                if self.log {
                    0.5 * (b.ln() - a.ln()) * (ga * a + gb * b)
                } else {
                    0.5 * (b - a) * (ga + gb)
                }
            })
            .collect();
        pairwise_sum(&terms)
    }

    pub fn is_log(&self) -> bool {
        self.log
    }

    pub fn terminal_mass(&self) -> f64 {
        self.mass(self.values.len() - 1)
    }

    /// Terminal slice as a density (undiscounted).
    pub fn terminal_density(&self) -> Result<DensityGrid> {
        let df = *self.discount_factors.last().expect("at least one slice");
        let p = self.terminal().iter().map(|g| g / df).collect();
        DensityGrid::new(self.s_values.clone(), p, self.horizon())
    }

    /// `t,S,G` rows after a `#` header with the source.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# t0={} S0={} model={}",
            fmt17(self.t0),
            fmt17(self.s0),
            self.model_hash
        )?;
        writeln!(w, "t,S,G")?;
        for (m, slice) in self.values.iter().enumerate() {
            for (s, g) in self.s_values.iter().zip(slice) {
                writeln!(
                    w,
                    "{},{},{}",
                    fmt17(self.times[m + 1]),
                    fmt17(*s),
                    fmt17(*g)
                )?;
            }
        }
        Ok(())
    }
}

/// Lattice resolution for [`greens_function_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeOptions {
    pub n_nodes: usize,
}

impl Default for LatticeOptions {
    fn default() -> Self {
        Self { n_nodes: 801 }
    }
}

/// Number of kernel steps covering `horizon` with steps no longer than `dt`.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    ensure_finite("dt", dt)?;
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(domain(format!(
            "need horizon > 0 and dt > 0, got {horizon} and {dt}"
        )));
    }
    Ok(((horizon / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize)
}

/// Green's function of a (risk-neutral) model started at `(t0, S0)`.
///
/// `dt` is an upper bound; the horizon is split into equal steps. The first
/// step is taken exactly from the point mass at `S0`. Positive processes are
/// propagated in log price.
pub fn greens_function(
    model: &ModelSpec,
    curve: &DiscountCurve,
    t0: f64,
    s0: f64,
    t: f64,
    dt: f64,
) -> Result<GreensFunction> {
    greens_function_with(model, curve, t0, s0, t, dt, LatticeOptions::default())
}

pub fn greens_function_with(
    model: &ModelSpec,
    curve: &DiscountCurve,
    t0: f64,
    s0: f64,
    t: f64,
    dt: f64,
    options: LatticeOptions,
) -> Result<GreensFunction> {
    model.require_one_dimensional()?;
    ensure_finite("S0", s0)?;
    let n_steps = step_count(t - t0, dt)?;
    let dt = (t - t0) / n_steps as f64;
    let coordinate = if model.is_positive_process() {
        KernelCoordinate::Log
    } else {
        KernelCoordinate::Price
    };
    let grid = default_space_grid_with(model, t0, s0, t, options.n_nodes)?;
    let kernel = ShortTimeKernel::new(model, t0, dt, coordinate)?;
    let lattice = Lattice::new(&kernel, &grid)?;
    let first = lattice.row(kernel.law_at(t0, s0)?);
    if first.leak > MAX_LEAK {
        return Err(Error::BoundaryLeak {
            lost: first.leak,
            lo: grid[0],
            hi: grid[grid.len() - 1],
        });
    }
    let mut q1 = vec![0.0; grid.len()];
    for (k, v) in first.values.iter().enumerate() {
        q1[first.start + k] = *v;
    }
    let mut slices = vec![q1.clone()];
    let (_, lost) = march(&kernel, &lattice, q1, t0, n_steps, true, |_, q| {
        slices.push(q.to_vec())
    })?;
    let leaked = first.leak + lost * (1.0 - first.leak);
    let times: Vec<f64> = (0..=n_steps).map(|m| t0 + m as f64 * dt).collect();
    let discount_factors: Vec<f64> = times[1..]
        .iter()
        .map(|&tm| curve.discount(t0, tm))
        .collect();
    let values = slices
        .into_iter()
        .zip(&discount_factors)
        .map(|(q, df)| {
            (0..q.len())
                .map(|j| df * lattice.to_price_density(j, q[j]))
                .collect()
        })
        .collect();
    Ok(GreensFunction {
        t0,
        s0,
        model_hash: model.hash(),
        times,
        s_values: grid,
        values,
        discount_factors,
        leaked,
        log: lattice.log,
    })
}

/// Monte Carlo estimate of `E f(S_T)` with increments drawn from the
/// short-time kernel (price coordinate), on its own noise stream.
pub fn pi_expectation<F>(
    model: &ModelSpec,
    f: F,
    t0: f64,
    s0: f64,
    horizon_end: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MCEstimate>
where
    F: Fn(f64) -> f64 + Sync,
{
    ensure_finite("S0", s0)?;
    if n_paths == 0 {
        return Err(domain("need at least one path"));
    }
    let n_steps = step_count(horizon_end - t0, dt)?;
    let dt = (horizon_end - t0) / n_steps as f64;
    let kernel = one_step_kernel(model, t0, dt)?;
    let noise = NoiseSource::new(seed).derive(PI_STREAM);
    let values: Vec<std::result::Result<f64, (usize, Error)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut s = s0;
            for m in 0..n_steps {
                let xi = noise.normal(p as u64, m as u64, 0);
                s = kernel
                    .sample(t0 + m as f64 * dt, s, xi)
                    .map_err(|e| (p, e))?;
                if !s.is_finite() {
                    return Err((
                        p,
                        Error::PathBlowup {
                            path: p,
                            step: m + 1,
                        },
                    ));
                }
            }
            Ok(f(s))
        })
        .collect();
    let mut out = Vec::with_capacity(n_paths);
    for v in values {
        match v {
            Ok(x) => out.push(x),
            Err((_, e)) => return Err(e),
        }
    }
    Ok(MCEstimate::from_values(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{compose_transition, density_bm, density_gbm, Density};
    use crate::models::{make_bm, make_gbm, make_vasicek};
    use crate::numerics::linspace;

    #[test]
    fn kernel_matches_euler_law() {
        let m = make_vasicek(2.0, 0.05, 0.02).unwrap();
        let k = one_step_kernel(&m, 0.0, 0.01).unwrap();
        let s: f64 = 0.03;
        let (mu, sd) = (2.0 * (0.05 - s), 0.02 * 0.1);
        let x: f64 = 0.0312;
        let want = (-(x - s - mu * 0.01).powi(2) / (2.0 * sd * sd)).exp()
            / (sd * (2.0 * std::f64::consts::PI).sqrt());
        assert!((k.pdf(s, x).unwrap() - want).abs() < 1e-12 * want);
    }

    #[test]
    fn zero_drift_kernel_is_symmetric() {
        let k = one_step_kernel(&make_bm(0.0, 0.4).unwrap(), 0.0, 0.1).unwrap();
        for j in 1..20 {
            let d = 0.05 * j as f64;
            let (a, b) = (k.pdf(1.0, 1.0 + d).unwrap(), k.pdf(1.0, 1.0 - d).unwrap());
            assert!((a - b).abs() <= 1e-14 * a);
        }
    }

    #[test]
    fn zero_vol_is_degenerate() {
        let k = one_step_kernel(&make_bm(0.5, 0.0).unwrap(), 0.0, 0.1).unwrap();
        assert_eq!(k.law(1.0).unwrap(), StepLaw::Deterministic { to: 1.05 });
        assert_eq!(k.pdf(1.0, 1.05).unwrap(), 0.0);
    }

    #[test]
    fn rows_are_normalized() {
        let k = one_step_kernel(&make_bm(0.1, 0.3).unwrap(), 0.0, 0.01).unwrap();
        let grid = linspace(-2.0, 2.0, 401);
        let f = k.family(&grid).unwrap();
        let w: Vec<f64> = {
            let h = grid[1] - grid[0];
            let mut w = vec![h; grid.len()];
            w[0] *= 0.5;
            w[grid.len() - 1] *= 0.5;
            w
        };
        for i in 50..350 {
            let mass: f64 = (0..grid.len()).map(|j| f.kernel[(i, j)] * w[j]).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let k = one_step_kernel(&make_bm(0.0, 1.0).unwrap(), 0.0, 0.1).unwrap();
        let g = DensityGrid::point_mass(linspace(-5.0, 5.0, 101), 0.0, 0.0).unwrap();
        assert_eq!(propagate(&k, &g, 0).unwrap(), g);
    }

    #[test]
    fn bm_self_composition_is_gaussian() {
        let (sigma, dt, n) = (0.5, 0.01, 50);
        let m = make_bm(0.0, sigma).unwrap();
        let k = one_step_kernel(&m, 0.0, dt).unwrap();
        let s = linspace(-4.0, 4.0, 801);
        let g0 = DensityGrid::from_fn(s, 0.0, &density_bm(0.04, 0.0, 0.0, sigma).unwrap()).unwrap();
        let out = propagate(&k, &g0, n).unwrap();
        let want = density_bm(0.04 + n as f64 * dt, 0.0, 0.0, sigma).unwrap();
        assert!(out.l1_error(&want) < 1e-4);
        assert!((out.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn chapman_kolmogorov_by_construction() {
        let m = make_vasicek(1.0, 0.0, 0.5).unwrap();
        let k = one_step_kernel(&m, 0.0, 0.05).unwrap();
        let grid = linspace(-3.0, 3.0, 241);
        let one = k.family(&grid).unwrap();
        let later = k.at_time(0.05).family(&grid).unwrap();
        let two = compose_transition(&one, &later).unwrap();
        let init =
            DensityGrid::from_fn(grid.clone(), 0.0, &density_bm(1.0, 0.2, 0.0, 0.3).unwrap())
                .unwrap();
        let prop = propagate(&k, &init, 2).unwrap();
        let w: Vec<f64> = {
            let h = grid[1] - grid[0];
            let mut w = vec![h; grid.len()];
            w[0] *= 0.5;
            w[grid.len() - 1] *= 0.5;
            w
        };
        for j in 0..grid.len() {
            let via: f64 = (0..grid.len())
                .map(|i| init.p_values[i] * w[i] * two.kernel[(i, j)])
                .sum();
            assert!((via - prop.p_values[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn leak_is_reported() {
        let m = make_bm(5.0, 0.1).unwrap();
        let k = one_step_kernel(&m, 0.0, 0.1).unwrap();
        let g = DensityGrid::point_mass(linspace(-1.0, 1.0, 201), 0.0, 0.0).unwrap();
        assert!(matches!(
            propagate(&k, &g, 20),
            Err(Error::BoundaryLeak { .. })
        ));
    }

    #[test]
    fn green_mass_is_discount_factor() {
        let m = make_gbm(0.03, 0.25).unwrap();
        let curve = DiscountCurve::flat(0.03).unwrap();
        let rn = m.with_risk_neutral_drift(curve.clone());
        let g = greens_function(&rn, &curve, 0.0, 100.0, 1.0, 1.0 / 100.0).unwrap();
        assert!((g.terminal_mass() - (-0.03f64).exp()).abs() < 1e-10);
        let d = g.terminal_density().unwrap();
        let want = density_gbm(1.0, 100.0, 0.03, 0.25).unwrap();
        assert!(d.l1_error(&want) < 1e-3);
        assert!(want.pdf(100.0) > 0.0);
    }

    #[test]
    fn pi_expectation_normalization_and_mean() {
        let m = make_bm(0.3, 1.0).unwrap();
        let one = pi_expectation(&m, |_| 1.0, 0.0, 0.0, 1.0, 0.1, 1000, 1).unwrap();
        assert_eq!((one.mean, one.std_error), (1.0, 0.0));
        let e = pi_expectation(&m, |s| s, 0.0, 2.0, 1.0, 0.1, 20_000, 2).unwrap();
        assert!((e.mean - 2.3).abs() < 3.0 * e.std_error);
    }
}
