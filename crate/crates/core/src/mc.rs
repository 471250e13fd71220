//! Path simulation and Monte Carlo expectations.
//!
//! Paths follow the explicit Euler recursion
//! `S_{m+1} = S_m + mu(t_m, S_m) dt + sigma(t_m, S_m) sqrt(dt) xi_m`
//! with noise drawn from a counter-based generator keyed by
//! `(seed, path, step, component)`. Every estimator reduces per-path values
//! with pairwise summation in path order, so results do not depend on the
//! number of worker threads.

use std::io::{Read, Write};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, ensure_finite, validation, Error, Result};
use crate::models::{Dynamics, ModelSpec};
use crate::numerics::{fmt17, sample_moments, variance_with_error};
use crate::rng::NoiseSource;

/// Uniform time grid `t_m = t0 + m*dt`, `m = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        ensure_finite("t0", t0)?;
        ensure_finite("dt", dt)?;
        if dt <= 0.0 {
            return Err(domain(format!("time step must be > 0, got {dt}")));
        }
        if n_steps == 0 {
            return Err(domain("time grid needs at least one step"));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Grid covering `[t0, t0 + horizon]` in `n_steps` equal steps.
    pub fn over(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(domain("time grid needs at least one step"));
        }
        Self::new(t0, horizon / n_steps as f64, n_steps)
    }

    /// Grid with step `dt` that must divide `horizon` exactly.
    pub fn with_step(t0: f64, horizon: f64, dt: f64) -> Result<Self> {
        ensure_finite("horizon", horizon)?;
        ensure_finite("dt", dt)?;
        if horizon <= 0.0 || dt <= 0.0 {
            return Err(domain(format!(
                "need horizon > 0 and dt > 0, got horizon={horizon} dt={dt}"
            )));
        }
        let ratio = horizon / dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(domain(format!(
                "horizon {horizon} is not an integer multiple of dt {dt}"
            )));
        }
        Self::new(t0, dt, n as usize)
    }

    pub fn time(&self, m: usize) -> f64 {
        self.t0 + m as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

/// How a batch was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Explicit Euler steps on the full grid.
    Euler,
    /// Closed-form terminal draw (geometric models only); the batch holds
    /// just the initial and terminal states.
    ExactTerminal,
}

/// Simulated trajectories on a shared grid. Values are stored path-major:
/// `values[(path * (n_steps + 1) + step) * dim + asset]`.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub model_hash: String,
    pub sampler: Sampler,
    values: Vec<f64>,
}

/// Read-only view of one simulated path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    grid: TimeGrid,
    dim: usize,
    values: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn time(&self, step: usize) -> f64 {
        self.grid.time(step)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state(&self, step: usize) -> &'a [f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn at(&self, step: usize, asset: usize) -> f64 {
        self.values[step * self.dim + asset]
    }

    pub fn terminal(&self, asset: usize) -> f64 {
        self.at(self.grid.n_steps, asset)
    }
}

impl PathBatch {
    fn stride(&self) -> usize {
        (self.grid.n_steps + 1) * self.dim
    }

    pub fn path(&self, i: usize) -> PathView<'_> {
        let s = self.stride();
        PathView {
            grid: self.grid,
            dim: self.dim,
            values: &self.values[i * s..(i + 1) * s],
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = PathView<'_>> {
        (0..self.n_paths).map(move |i| self.path(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Columnar CSV: `path_id,step,asset,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path_id,step,asset,value")?;
        for p in 0..self.n_paths {
            let view = self.path(p);
            for step in 0..=self.grid.n_steps {
                for a in 0..self.dim {
                    writeln!(w, "{p},{step},{a},{}", fmt17(view.at(step, a)))?;
                }
            }
        }
        Ok(())
    }

    /// Binary layout, all little-endian:
    ///
    /// | bytes | field |
    /// |---|---|
    /// | 4 | magic `STPB` |
    /// | 4 | version (u32, = 1) |
    /// | 8 | n_paths (u64) |
    /// | 8 | n_steps (u64) |
    /// | 8 | dim (u64) |
    /// | 8 | t0 (f64) |
    /// | 8 | dt (f64) |
    /// | 8 | seed (u64) |
    /// | 8 | sampler (u64: 0 Euler, 1 exact terminal) |
    /// | 32 | model hash, ASCII hex |
    /// | 8 each | values (f64), path-major |
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"STPB")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.grid.n_steps as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.grid.t0.to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let sampler: u64 = match self.sampler {
            Sampler::Euler => 0,
            Sampler::ExactTerminal => 1,
        };
        w.write_all(&sampler.to_le_bytes())?;
        let mut hash = [b'0'; 32];
        for (dst, src) in hash.iter_mut().zip(self.model_hash.bytes()) {
            *dst = src;
        }
        w.write_all(&hash)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"STPB" {
            return Err(validation("not a path batch file (bad magic)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(validation("unsupported path batch version"));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_paths = next_u64(&mut r)? as usize;
        let n_steps = next_u64(&mut r)? as usize;
        let dim = next_u64(&mut r)? as usize;
        let t0 = f64::from_bits(next_u64(&mut r)?);
        let dt = f64::from_bits(next_u64(&mut r)?);
        let seed = next_u64(&mut r)?;
        let sampler = match next_u64(&mut r)? {
            0 => Sampler::Euler,
            1 => Sampler::ExactTerminal,
            other => return Err(validation(format!("unknown sampler tag {other}"))),
        };
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let model_hash = String::from_utf8_lossy(&hash).into_owned();
        let count = n_paths * (n_steps + 1) * dim;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Ok(Self {
            grid: TimeGrid::new(t0, dt, n_steps)?,
            dim,
            n_paths,
            seed,
            model_hash,
            sampler,
            values,
        })
    }
}

/// Monte Carlo estimate of a mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl MCEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let (mean, _, se) = sample_moments(values);
        Self {
            mean,
            std_error: se,
            n_paths: values.len(),
        }
    }

    /// `(mean - target) / std_error`; zero when both the error and the
    /// deviation vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if self.std_error == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                d.signum() * f64::INFINITY
            }
        } else {
            d / self.std_error
        }
    }
}

/// Reusable buffers for one Euler step.
pub(crate) struct StepScratch {
    drift: Vec<f64>,
    vol: Vec<f64>,
}

impl StepScratch {
    pub(crate) fn new(model: &ModelSpec) -> Self {
        Self {
            drift: vec![0.0; model.dim()],
            vol: vec![0.0; model.dim() * model.noise_dim()],
        }
    }
}

#[inline]
pub(crate) fn euler_into(
    model: &ModelSpec,
    t: f64,
    s: &[f64],
    xi: &[f64],
    dt: f64,
    sqrt_dt: f64,
    out: &mut [f64],
    scratch: &mut StepScratch,
) -> Result<()> {
    let n = s.len();
    let k = xi.len();
    model.drift(t, s, &mut scratch.drift);
    model.vol(t, s, &mut scratch.vol);
    if scratch
        .drift
        .iter()
        .chain(&scratch.vol)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteCoefficient {
            t,
            state: s.to_vec(),
        });
    }
    for a in 0..n {
        let mut noise = 0.0;
        for j in 0..k {
            noise += scratch.vol[a * k + j] * xi[j];
        }
        out[a] = s[a] + scratch.drift[a] * dt + noise * sqrt_dt;
    }
    Ok(())
}

/// One explicit Euler step `S + mu dt + sigma sqrt(dt) xi`.
pub fn evolve_step(model: &ModelSpec, t: f64, s: &[f64], xi: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(domain(format!("time step must be > 0, got {dt}")));
    }
    check_state(model, s)?;
    if xi.len() != model.noise_dim() {
        return Err(Error::Dimension {
            what: "noise vector",
            expected: model.noise_dim(),
            got: xi.len(),
        });
    }
    let mut out = vec![0.0; s.len()];
    euler_into(
        model,
        t,
        s,
        xi,
        dt,
        dt.sqrt(),
        &mut out,
        &mut StepScratch::new(model),
    )?;
    Ok(out)
}

fn check_state(model: &ModelSpec, s0: &[f64]) -> Result<()> {
    if s0.len() != model.dim() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: model.dim(),
            got: s0.len(),
        });
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(validation("initial state must be finite"));
    }
    Ok(())
}

/// Simulate one path into `out` (`(n_steps+1) * dim` values).
#[derive(Debug, Clone, Copy)]
enum ScalarDrift {
    Constant(f64),
    Proportional(f64),
    /// `r(t_m) S` with the rate tabulated per step.
    Tabulated,
    MeanReverting(f64, f64),
}

/// Coefficients of a one-dimensional built-in model, evaluated with the
/// same floating-point operations as [`euler_into`] so both routes agree
/// bit for bit.
#[derive(Debug, Clone)]
struct ScalarPlan {
    drift: ScalarDrift,
    vol: f64,
    proportional_vol: bool,
    rates: Vec<f64>,
}

impl ScalarPlan {
    fn new(model: &ModelSpec, grid: &TimeGrid) -> Option<Self> {
        if model.dim() != 1 || model.noise_dim() != 1 {
            return None;
        }
        if model.loading().is_some_and(|l| l[(0, 0)] != 1.0) {
            return None;
        }
        let (mut drift, vol, proportional_vol) = match model.dynamics() {
            Dynamics::Brownian { mu, sigma } => (ScalarDrift::Constant(mu[0]), sigma[0], false),
            Dynamics::Geometric { mu, sigma } => (ScalarDrift::Proportional(mu[0]), sigma[0], true),
            Dynamics::Vasicek { a, b, sigma } => {
                (ScalarDrift::MeanReverting(a[0], b[0]), sigma[0], false)
            }
            Dynamics::LocalGrid { .. } | Dynamics::Custom(_) => return None,
        };
        let mut rates = Vec::new();
        if let Some(curve) = model.risk_neutral_curve() {
            drift = ScalarDrift::Tabulated;
            rates = (0..grid.n_steps)
                .map(|m| curve.rate_at(grid.time(m)))
                .collect();
        }
        Some(Self {
            drift,
            vol,
            proportional_vol,
            rates,
        })
    }

    fn run(&self, grid: &TimeGrid, xi: &[f64], out: &mut [f64], path: usize) -> Result<()> {
        match self.drift {
            ScalarDrift::Constant(mu) => self.run_with(grid, xi, out, path, |_, _| mu),
            ScalarDrift::Proportional(mu) => self.run_with(grid, xi, out, path, |_, s| mu * s),
            ScalarDrift::Tabulated => self.run_with(grid, xi, out, path, |m, s| self.rates[m] * s),
            ScalarDrift::MeanReverting(a, b) => self.run_with(grid, xi, out, path, |_, s| a * (b - s)),
        }
    }

    #[inline(always)]
    fn run_with(
        &self,
        grid: &TimeGrid,
        xi: &[f64],
        out: &mut [f64],
        path: usize,
        drift: impl Fn(usize, f64) -> f64,
    ) -> Result<()> {
        let n = grid.n_steps;
        let dt = grid.dt;
        let sqrt_dt = dt.sqrt();
        let (xi, out) = (&xi[..n], &mut out[..=n]);
        let mut s = out[0];
        for m in 0..n {
            let vol = if self.proportional_vol { self.vol * s } else { self.vol };
            let noise = 0.0 + vol * xi[m];
            s = s + drift(m, s) * dt + noise * sqrt_dt;
            out[m + 1] = s;
        }
        // Non-finite values propagate, so the first one marks the blow-up.
        if !s.is_finite() {
            let step = out.iter().position(|v| !v.is_finite()).unwrap_or(n);
            return Err(Error::PathBlowup { path, step });
        }
        Ok(())
    }
}

fn simulate_one(
    model: &ModelSpec,
    plan: Option<&ScalarPlan>,
    s0: &[f64],
    grid: &TimeGrid,
    noise: &NoiseSource,
    path: usize,
    out: &mut [f64],
    xi: &mut [f64],
    scratch: &mut StepScratch,
) -> Result<()> {
    let n = s0.len();
    let k = model.noise_dim();
    let sqrt_dt = grid.dt.sqrt();
    noise.fill_path(path as u64, grid.n_steps, k, xi);
    out[..n].copy_from_slice(s0);
    if let Some(plan) = plan {
        return plan.run(grid, xi, out, path);
    }
    for m in 0..grid.n_steps {
        let (done, rest) = out.split_at_mut((m + 1) * n);
        let cur = &done[m * n..];
        let next = &mut rest[..n];
        euler_into(
            model,
            grid.time(m),
            cur,
            &xi[m * k..(m + 1) * k],
            grid.dt,
            sqrt_dt,
            next,
            scratch,
        )?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathBlowup { path, step: m + 1 });
        }
    }
    Ok(())
}

fn check_simulation_inputs(model: &ModelSpec, s0: &[f64], n_paths: usize) -> Result<()> {
    check_state(model, s0)?;
    if n_paths == 0 {
        return Err(domain("need at least one path"));
    }
    Ok(())
}

/// Keeps the error of the lowest failing path so that reports do not
/// depend on scheduling.
struct FirstError(Mutex<Option<(usize, Error)>>);

impl FirstError {
    fn new() -> Self {
        Self(Mutex::new(None))
    }

    fn record(&self, path: usize, err: Error) {
        let mut slot = self.0.lock().expect("error slot poisoned");
        if slot.as_ref().map_or(true, |(p, _)| path < *p) {
            *slot = Some((path, err));
        }
    }

    fn into_result(self) -> Result<()> {
        match self.0.into_inner().expect("error slot poisoned") {
            Some((_, e)) => Err(e),
            None => Ok(()),
        }
    }
}

/// Simulate and store `n_paths` Euler paths.
pub fn simulate_paths(
    model: &ModelSpec,
    s0: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    check_simulation_inputs(model, s0, n_paths)?;
    let dim = model.dim();
    let stride = (grid.n_steps + 1) * dim;
    let noise = NoiseSource::new(seed);
    let mut values = vec![0.0; n_paths * stride];
    let k = model.noise_dim();
    let plan = ScalarPlan::new(model, &grid);
    let first_error = FirstError::new();
    values.par_chunks_mut(stride).enumerate().for_each_init(
        || (vec![0.0; grid.n_steps * k], StepScratch::new(model)),
        |(xi, scratch), (p, out)| {
            if let Err(e) =
                simulate_one(model, plan.as_ref(), s0, &grid, &noise, p, out, xi, scratch)
            {
                first_error.record(p, e);
            }
        },
    );
    first_error.into_result()?;
    Ok(PathBatch {
        grid,
        dim,
        n_paths,
        seed,
        model_hash: model.hash(),
        sampler: Sampler::Euler,
        values,
    })
}

/// Simulate paths without storing them, returning `f(path)` for each path
/// in path order. Produces exactly the values `expectation` would see on
/// the stored batch with the same noise.
pub(crate) fn simulate_map<F>(
    model: &ModelSpec,
    s0: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    noise: NoiseSource,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(PathView<'_>) -> f64 + Sync,
{
    check_simulation_inputs(model, s0, n_paths)?;
    let dim = model.dim();
    let stride = (grid.n_steps + 1) * dim;
    let k = model.noise_dim();
    let plan = ScalarPlan::new(model, &grid);
    let first_error = FirstError::new();
    let out: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0.0; stride],
                    vec![0.0; grid.n_steps * k],
                    StepScratch::new(model),
                )
            },
            |(buf, xi, scratch), p| match simulate_one(
                model,
                plan.as_ref(),
                s0,
                &grid,
                &noise,
                p,
                buf,
                xi,
                scratch,
            ) {
                Ok(()) => f(PathView {
                    grid,
                    dim,
                    values: buf,
                }),
                Err(e) => {
                    first_error.record(p, e);
                    f64::NAN
                }
            },
        )
        .collect();
    first_error.into_result()?;
    Ok(out)
}

/// Terminal draws from the closed-form solution of a geometric model,
/// `S_T = S_0 exp((mu - sigma^2/2) T + sigma sqrt(T) xi)` (with `mu T`
/// replaced by the integrated short rate for risk-neutral models).
pub fn simulate_terminal_exact(
    model: &ModelSpec,
    s0: &[f64],
    t0: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    check_simulation_inputs(model, s0, n_paths)?;
    let Dynamics::Geometric { mu, sigma } = model.dynamics() else {
        return Err(validation(
            "exact terminal sampling needs a geometric model",
        ));
    };
    let grid = TimeGrid::new(t0, horizon, 1)?;
    let dim = model.dim();
    let k = model.noise_dim();
    // unit loading: vol(S = 1) / sigma
    let ones = vec![1.0; dim];
    let unit = model.vol_matrix(t0, &ones);
    let growth: Vec<f64> = (0..dim)
        .map(|a| match model.risk_neutral_curve() {
            Some(c) => c.integral(t0, t0 + horizon),
            None => mu[a] * horizon,
        } - 0.5 * sigma[a] * sigma[a] * horizon)
        .collect();
    let sqrt_t = horizon.sqrt();
    let noise = NoiseSource::new(seed);
    let mut values = vec![0.0; n_paths * 2 * dim];
    values
        .par_chunks_mut(2 * dim)
        .enumerate()
        .for_each(|(p, out)| {
            out[..dim].copy_from_slice(s0);
            for a in 0..dim {
                let mut z = 0.0;
                for j in 0..k {
                    z += unit[(a, j)] * noise.normal(p as u64, 0, j as u32);
                }
                out[dim + a] = s0[a] * (growth[a] + z * sqrt_t).exp();
            }
        });
    Ok(PathBatch {
        grid,
        dim,
        n_paths,
        seed,
        model_hash: model.hash(),
        sampler: Sampler::ExactTerminal,
        values,
    })
}

/// Sample mean of a path functional with its standard error.
pub fn expectation<F>(f: F, batch: &PathBatch) -> MCEstimate
where
    F: Fn(PathView<'_>) -> f64 + Sync,
{
    let values: Vec<f64> = (0..batch.n_paths)
        .into_par_iter()
        .map(|i| f(batch.path(i)))
        .collect();
    MCEstimate::from_values(&values)
}

/// Coefficients `J_{m,a}` of the generating functional
/// `E exp(sum_{m,a} J_{m,a} S_{m,a})`, stored as `(n_steps+1) x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MgfWeights {
    n_steps: usize,
    dim: usize,
    values: Vec<f64>,
}

impl MgfWeights {
    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            n_steps: grid.n_steps,
            dim,
            values: vec![0.0; (grid.n_steps + 1) * dim],
        }
    }

    pub fn dense(grid: &TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        let expected = (grid.n_steps + 1) * dim;
        if values.len() != expected {
            return Err(Error::Dimension {
                what: "mgf coefficients",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            n_steps: grid.n_steps,
            dim,
            values,
        })
    }

    pub fn set(&mut self, step: usize, asset: usize, value: f64) -> Result<()> {
        if step > self.n_steps || asset >= self.dim {
            return Err(validation(format!(
                "mgf index ({step}, {asset}) outside grid {}x{}",
                self.n_steps + 1,
                self.dim
            )));
        }
        self.values[step * self.dim + asset] = value;
        Ok(())
    }
}

/// Monte Carlo estimate of `E exp(sum J S)`.
pub fn mgf(weights: &MgfWeights, batch: &PathBatch) -> Result<MCEstimate> {
    if weights.n_steps != batch.grid.n_steps || weights.dim != batch.dim {
        return Err(validation("mgf coefficients do not match the batch grid"));
    }
    let active: Vec<(usize, usize, f64)> = (0..=weights.n_steps)
        .flat_map(|m| (0..weights.dim).map(move |a| (m, a)))
        .filter_map(|(m, a)| {
            let j = weights.values[m * weights.dim + a];
            (j != 0.0).then_some((m, a, j))
        })
        .collect();
    let exponents: Vec<f64> = (0..batch.n_paths)
        .into_par_iter()
        .map(|i| {
            let p = batch.path(i);
            active.iter().map(|&(m, a, j)| j * p.at(m, a)).sum::<f64>()
        })
        .collect();
    let max_exponent = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max_exponent < f64::MAX.ln()) {
        return Err(Error::ExponentOverflow { max_exponent });
    }
    let values: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    Ok(MCEstimate::from_values(&values))
}

/// A smooth map `X = f(t, S)` together with its partial derivatives.
pub trait ItoFunction: Sync {
    fn value(&self, t: f64, s: f64) -> f64;
    fn d_t(&self, t: f64, s: f64) -> f64;
    fn d_s(&self, t: f64, s: f64) -> f64;
    fn d_ss(&self, t: f64, s: f64) -> f64;
}

/// [`ItoFunction`] assembled from closures.
pub struct FnMap<V, T, S, SS> {
    pub value: V,
    pub d_t: T,
    pub d_s: S,
    pub d_ss: SS,
}

impl<V, T, S, SS> ItoFunction for FnMap<V, T, S, SS>
where
    V: Fn(f64, f64) -> f64 + Sync,
    T: Fn(f64, f64) -> f64 + Sync,
    S: Fn(f64, f64) -> f64 + Sync,
    SS: Fn(f64, f64) -> f64 + Sync,
{
    fn value(&self, t: f64, s: f64) -> f64 {
        (self.value)(t, s)
    }
    fn d_t(&self, t: f64, s: f64) -> f64 {
        (self.d_t)(t, s)
    }
    fn d_s(&self, t: f64, s: f64) -> f64 {
        (self.d_s)(t, s)
    }
    fn d_ss(&self, t: f64, s: f64) -> f64 {
        (self.d_ss)(t, s)
    }
}

/// `X = S`.
pub struct Identity;
/// `X = ln S`.
pub struct LogPrice;
/// `X = S^2`.
pub struct Square;

impl ItoFunction for Identity {
    fn value(&self, _t: f64, s: f64) -> f64 {
        s
    }
    fn d_t(&self, _t: f64, _s: f64) -> f64 {
        0.0
    }
    fn d_s(&self, _t: f64, _s: f64) -> f64 {
        1.0
    }
    fn d_ss(&self, _t: f64, _s: f64) -> f64 {
        0.0
    }
}

impl ItoFunction for LogPrice {
    fn value(&self, _t: f64, s: f64) -> f64 {
        s.ln()
    }
    fn d_t(&self, _t: f64, _s: f64) -> f64 {
        0.0
    }
    fn d_s(&self, _t: f64, s: f64) -> f64 {
        1.0 / s
    }
    fn d_ss(&self, _t: f64, s: f64) -> f64 {
        -1.0 / (s * s)
    }
}

impl ItoFunction for Square {
    fn value(&self, _t: f64, s: f64) -> f64 {
        s * s
    }
    fn d_t(&self, _t: f64, _s: f64) -> f64 {
        0.0
    }
    fn d_s(&self, _t: f64, s: f64) -> f64 {
        2.0 * s
    }
    fn d_ss(&self, _t: f64, _s: f64) -> f64 {
        2.0
    }
}

/// Outcome of an Itô-formula check over one Euler step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoReport {
    pub empirical_drift: f64,
    pub predicted_drift: f64,
    pub empirical_vol: f64,
    pub predicted_vol: f64,
    /// z-score of the mean increment against `predicted_drift * dt`.
    pub drift_z: f64,
    /// z-score of the increment variance against `predicted_vol^2 * dt`.
    pub vol_z: f64,
    pub n_paths: usize,
    pub dt: f64,
}

fn check_derivatives(f: &dyn ItoFunction, t: f64, s: f64) -> Result<()> {
    let hs = 1e-4 * s.abs().max(1.0);
    let ht = 1e-4 * t.abs().max(1.0);
    let f0 = f.value(t, s);
    let fp = f.value(t, s + hs);
    let fm = f.value(t, s - hs);
    let fd_s = (fp - fm) / (2.0 * hs);
    let fd_ss = (fp - 2.0 * f0 + fm) / (hs * hs);
    let fd_t = (f.value(t + ht, s) - f.value(t - ht, s)) / (2.0 * ht);
    // absolute floors cover rounding in the difference quotients
    let noise = 1e-10 * (1.0 + f0.abs());
    let checks = [
        ("d/dt", f.d_t(t, s), fd_t, noise / ht),
        ("d/dS", f.d_s(t, s), fd_s, noise / hs),
        ("d2/dS2", f.d_ss(t, s), fd_ss, noise / (hs * hs)),
    ];
    for (name, supplied, fd, floor) in checks {
        let tol = 1e-4 * supplied.abs().max(fd.abs()) + floor;
        if !supplied.is_finite() || (supplied - fd).abs() > tol {
            return Err(validation(format!(
                "supplied {name} = {supplied} disagrees with finite difference {fd}"
            )));
        }
    }
    Ok(())
}

/// Compare one-step increments of `X = f(t, S)` with the Itô prediction:
/// drift `f_t + mu f_S + sigma^2 f_SS / 2` and volatility `sigma f_S`.
pub fn ito_check(
    model: &ModelSpec,
    f: &dyn ItoFunction,
    t0: f64,
    s0: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ItoReport> {
    model.require_one_dimensional()?;
    check_derivatives(f, t0, s0)?;
    let grid = TimeGrid::new(t0, dt, 1)?;
    let mu = model.drift1(t0, s0);
    let sigma = model.vol1(t0, s0);
    let predicted_drift = f.d_t(t0, s0) + mu * f.d_s(t0, s0) + 0.5 * sigma * sigma * f.d_ss(t0, s0);
    let predicted_vol = (sigma * f.d_s(t0, s0)).abs();
    let x0 = f.value(t0, s0);
    let increments = simulate_map(model, &[s0], grid, n_paths, NoiseSource::new(seed), |p| {
        f.value(p.time(1), p.terminal(0)) - x0
    })?;
    if let Some(i) = increments.iter().position(|v| !v.is_finite()) {
        return Err(Error::PathBlowup { path: i, step: 1 });
    }
    let est = MCEstimate::from_values(&increments);
    let (var, var_se) = variance_with_error(&increments);
    let drift_z = est.z_score(predicted_drift * dt);
    let target_var = predicted_vol * predicted_vol * dt;
    let vol_z = if var_se > 0.0 {
        (var - target_var) / var_se
    } else if var == target_var {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ItoReport {
        empirical_drift: est.mean / dt,
        predicted_drift,
        empirical_vol: (var / dt).sqrt(),
        predicted_vol,
        drift_z,
        vol_z,
        n_paths,
        dt,
    })
}

/// Terminal sample statistics at one step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalMoments {
    pub dt: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

/// Coarse-versus-fine comparison of terminal moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingReport {
    pub coarse: TerminalMoments,
    pub fine: TerminalMoments,
    pub mean_z: f64,
    pub variance_z: f64,
    /// Closed-form terminal `(mean, variance)` for built-in models.
    pub exact: Option<(f64, f64)>,
    pub coarse_mean_bias: Option<f64>,
    pub fine_mean_bias: Option<f64>,
}

/// Exact terminal mean and variance of the built-in one-dimensional
/// models started at `s0` and run for `horizon`.
pub fn exact_terminal_moments(model: &ModelSpec, s0: f64, horizon: f64) -> Option<(f64, f64)> {
    if model.dim() != 1 || model.risk_neutral_curve().is_some() {
        return None;
    }
    let t = horizon;
    match model.dynamics() {
        Dynamics::Brownian { mu, sigma } => Some((s0 + mu[0] * t, sigma[0] * sigma[0] * t)),
        Dynamics::Geometric { mu, sigma } => {
            let m = s0 * (mu[0] * t).exp();
            Some((m, m * m * (sigma[0] * sigma[0] * t).exp_m1()))
        }
        Dynamics::Vasicek { a, b, sigma } => {
            let e = (-a[0] * t).exp();
            Some((
                s0 * e + b[0] * (1.0 - e),
                sigma[0] * sigma[0] * -(-2.0 * a[0] * t).exp_m1() / (2.0 * a[0]),
            ))
        }
        _ => None,
    }
}

fn terminal_moments(
    model: &ModelSpec,
    s0: f64,
    grid: TimeGrid,
    n_paths: usize,
    noise: NoiseSource,
) -> Result<TerminalMoments> {
    let terminal = simulate_map(model, &[s0], grid, n_paths, noise, |p| p.terminal(0))?;
    let est = MCEstimate::from_values(&terminal);
    let (variance, variance_se) = variance_with_error(&terminal);
    Ok(TerminalMoments {
        dt: grid.dt,
        mean: est.mean,
        mean_se: est.std_error,
        variance,
        variance_se,
    })
}

/// Run the same model at `dt` and `dt / refine_factor` and compare the
/// terminal mean and variance. The two runs use independent noise streams.
pub fn scaling_check(
    model: &ModelSpec,
    s0: f64,
    horizon: f64,
    dt: f64,
    refine_factor: usize,
    n_paths: usize,
    seed: u64,
) -> Result<ScalingReport> {
    model.require_one_dimensional()?;
    if refine_factor < 2 {
        return Err(domain(format!(
            "refine factor must be >= 2, got {refine_factor}"
        )));
    }
    let coarse_grid = TimeGrid::with_step(0.0, horizon, dt)?;
    let fine_grid = TimeGrid::new(
        0.0,
        dt / refine_factor as f64,
        coarse_grid.n_steps * refine_factor,
    )?;
    let base = NoiseSource::new(seed);
    let coarse = terminal_moments(model, s0, coarse_grid, n_paths, base)?;
    let fine = terminal_moments(model, s0, fine_grid, n_paths, base.derive(1))?;
    let z = |a: f64, b: f64, sa: f64, sb: f64| {
        let s = (sa * sa + sb * sb).sqrt();
        if s == 0.0 {
            if a == b {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (a - b) / s
        }
    };
    let exact = exact_terminal_moments(model, s0, horizon);
    Ok(ScalingReport {
        mean_z: z(coarse.mean, fine.mean, coarse.mean_se, fine.mean_se),
        variance_z: z(
            coarse.variance,
            fine.variance,
            coarse.variance_se,
            fine.variance_se,
        ),
        coarse_mean_bias: exact.map(|(m, _)| coarse.mean - m),
        fine_mean_bias: exact.map(|(m, _)| fine.mean - m),
        exact,
        coarse,
        fine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_bm, make_gbm, make_vasicek};

    #[test]
    fn evolve_step_examples() {
        let bm0 = make_bm(0.0, 1.0).unwrap();
        assert_eq!(
            evolve_step(&bm0, 0.0, &[3.0], &[0.0], 0.1).unwrap(),
            vec![3.0]
        );
        let drift_only = make_bm(1.0, 0.0).unwrap();
        assert_eq!(
            evolve_step(&drift_only, 0.0, &[2.0], &[0.7], 0.5).unwrap(),
            vec![2.5]
        );
        let gbm = make_gbm(0.0, 0.2).unwrap();
        let s = evolve_step(&gbm, 0.0, &[100.0], &[1.0], 0.01).unwrap();
        assert!((s[0] - 102.0).abs() < 1e-12);
        assert!(evolve_step(&gbm, 0.0, &[100.0], &[1.0], 0.0).is_err());
        assert!(evolve_step(&gbm, 0.0, &[100.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn time_grid_is_not_accumulated() {
        let g = TimeGrid::new(0.1, 0.1, 1000).unwrap();
        assert_eq!(g.time(1000), 0.1 + 1000.0 * 0.1);
        assert!(TimeGrid::with_step(0.0, 1.0, 0.3).is_err());
        assert_eq!(TimeGrid::with_step(0.0, 1.0, 0.125).unwrap().n_steps, 8);
    }

    #[test]
    fn zero_noise_paths_are_constant() {
        let m = make_bm(0.0, 0.0).unwrap();
        let b = simulate_paths(&m, &[4.2], TimeGrid::new(0.0, 0.1, 5).unwrap(), 10, 1).unwrap();
        assert!(b.values().iter().all(|&v| v == 4.2));
    }

    #[test]
    fn same_seed_same_batch() {
        let m = make_bm(0.0, 1.0).unwrap();
        let g = TimeGrid::new(0.0, 0.01, 17).unwrap();
        let a = simulate_paths(&m, &[0.0], g, 33, 9).unwrap();
        let b = simulate_paths(&m, &[0.0], g, 33, 9).unwrap();
        assert_eq!(a.values(), b.values());
        let c = simulate_paths(&m, &[0.0], g, 33, 10).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn result_does_not_depend_on_thread_count() {
        let m = make_gbm(0.05, 0.3).unwrap();
        let g = TimeGrid::new(0.0, 0.02, 50).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let b = simulate_paths(&m, &[100.0], g, 2000, 5).unwrap();
                    (b.values().to_vec(), expectation(|p| p.terminal(0), &b))
                })
        };
        let (v1, e1) = run(1);
        let (v4, e4) = run(4);
        assert_eq!(v1, v4);
        assert_eq!(e1.mean.to_bits(), e4.mean.to_bits());
        assert_eq!(e1.std_error.to_bits(), e4.std_error.to_bits());
    }

    #[test]
    fn expectation_examples() {
        let m = make_bm(0.3, 0.0).unwrap();
        let b = simulate_paths(&m, &[1.0], TimeGrid::new(0.0, 0.25, 4).unwrap(), 100, 3).unwrap();
        let one = expectation(|_| 1.0, &b);
        assert_eq!((one.mean, one.std_error), (1.0, 0.0));
        let term = expectation(|p| p.terminal(0), &b);
        assert!((term.mean - 1.3).abs() < 1e-14);
        assert!(term.std_error < 1e-15);
    }

    #[test]
    fn streaming_matches_stored_batch() {
        let m = make_vasicek(1.5, 0.1, 0.2).unwrap();
        let g = TimeGrid::new(0.0, 0.05, 20).unwrap();
        let batch = simulate_paths(&m, &[0.0], g, 500, 77).unwrap();
        let stored: Vec<f64> = batch.paths().map(|p| p.terminal(0)).collect();
        let streamed =
            simulate_map(&m, &[0.0], g, 500, NoiseSource::new(77), |p| p.terminal(0)).unwrap();
        assert_eq!(stored, streamed);
    }

    #[test]
    fn mgf_zero_weights_is_one() {
        let m = make_bm(0.0, 1.0).unwrap();
        let g = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let b = simulate_paths(&m, &[0.0], g, 100, 1).unwrap();
        let est = mgf(&MgfWeights::zeros(&g, 1), &b).unwrap();
        assert_eq!((est.mean, est.std_error), (1.0, 0.0));
        let mut w = MgfWeights::zeros(&g, 1);
        w.set(10, 0, 1e4).unwrap();
        assert!(matches!(mgf(&w, &b), Err(Error::ExponentOverflow { .. })));
        assert!(w.set(11, 0, 1.0).is_err());
    }

    #[test]
    fn blowup_is_reported_with_path_and_step() {
        // dS = S^2 dt explodes in finite time
        struct Explode;
        impl crate::models::CustomDynamics for Explode {
            fn dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn drift(&self, _t: f64, s: &[f64], out: &mut [f64]) {
                out[0] = s[0] * s[0];
            }
            fn vol(&self, _t: f64, _s: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn describe(&self) -> String {
                "explode".into()
            }
        }
        let m = ModelSpec::custom(std::sync::Arc::new(Explode)).unwrap();
        let err =
            simulate_paths(&m, &[10.0], TimeGrid::new(0.0, 1.0, 20).unwrap(), 4, 0).unwrap_err();
        match err {
            Error::PathBlowup { path, step } => {
                assert_eq!(path, 0);
                assert!(step > 1);
            }
            Error::NonFiniteCoefficient { .. } => {}
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn inconsistent_derivatives_rejected() {
        let m = make_bm(0.0, 1.0).unwrap();
        let wrong = FnMap {
            value: |_t: f64, s: f64| s * s,
            d_t: |_t: f64, _s: f64| 0.0,
            d_s: |_t: f64, s: f64| 3.0 * s,
            d_ss: |_t: f64, _s: f64| 2.0,
        };
        assert!(ito_check(&m, &wrong, 0.0, 1.0, 1e-3, 100, 1).is_err());
        assert!(ito_check(&m, &Square, 0.0, 1.0, 1e-3, 100, 1).is_ok());
    }

    #[test]
    fn identity_map_reproduces_model() {
        let m = make_gbm(0.07, 0.3).unwrap();
        let r = ito_check(&m, &Identity, 0.0, 50.0, 1e-3, 1000, 2).unwrap();
        assert_eq!(r.predicted_drift, 0.07 * 50.0);
        assert!((r.predicted_vol - 15.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_drift_has_no_dt_dependence() {
        let m = make_bm(0.4, 0.0).unwrap();
        let r = scaling_check(&m, 1.0, 1.0, 0.125, 8, 10, 3).unwrap();
        assert!((r.coarse.mean - 1.4).abs() < 1e-13);
        assert!((r.fine.mean - 1.4).abs() < 1e-13);
        assert!(r.coarse.mean_se < 1e-15 && r.fine.mean_se < 1e-15);
        assert!(scaling_check(&m, 1.0, 1.0, 0.3, 8, 10, 3).is_err());
        assert!(scaling_check(&m, 1.0, 1.0, 0.125, 1, 10, 3).is_err());
    }

    #[test]
    fn binary_and_csv_export() {
        let m = make_gbm(0.0, 0.2).unwrap();
        let b = simulate_paths(&m, &[100.0], TimeGrid::new(0.0, 0.1, 3).unwrap(), 4, 8).unwrap();
        let mut bytes = Vec::new();
        b.write_binary(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 96 + 4 * 4 * 8);
        let back = PathBatch::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back.values(), b.values());
        assert_eq!(back.model_hash, b.model_hash);
        assert_eq!(back.seed, 8);
        let mut csv = Vec::new();
        b.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 16);
        assert!(text.starts_with("path_id,step,asset,value\n0,0,0,1.0000000000000000e2"));
    }

    #[test]
    fn exact_terminal_sampler_is_flagged() {
        let m = make_gbm(0.05, 0.2).unwrap();
        let b = simulate_terminal_exact(&m, &[100.0], 0.0, 1.0, 1000, 4).unwrap();
        assert_eq!(b.sampler, Sampler::ExactTerminal);
        assert_eq!(b.grid.n_steps, 1);
        assert!(
            simulate_terminal_exact(&make_bm(0.0, 1.0).unwrap(), &[0.0], 0.0, 1.0, 10, 1).is_err()
        );
    }

    #[test]
    fn scalar_fast_path_matches_generic_step() {
        use crate::portfolio::{CurvePoint, DiscountCurve};
        let curve = DiscountCurve::piecewise(&[
            CurvePoint { t: 0.0, r: 0.03 },
            CurvePoint { t: 0.4, r: 0.07 },
        ])
        .unwrap();
        let models = [
            make_bm(0.1, 0.3).unwrap(),
            make_gbm(0.05, 0.2).unwrap(),
            make_vasicek(2.0, 0.05, 0.02).unwrap(),
            make_gbm(0.05, 0.2).unwrap().with_risk_neutral_drift(curve),
        ];
        let grid = TimeGrid::new(0.0, 0.05, 20).unwrap();
        for model in &models {
            assert!(ScalarPlan::new(model, &grid).is_some());
            let batch = simulate_paths(model, &[1.0], grid, 4, 11).unwrap();
            let noise = NoiseSource::new(11);
            let mut scratch = StepScratch::new(model);
            for p in 0..4 {
                let mut s = vec![1.0];
                for m in 0..grid.n_steps {
                    let xi = [noise.normal(p as u64, m as u64, 0)];
                    let mut next = [0.0];
                    euler_into(
                        model,
                        grid.time(m),
                        &s,
                        &xi,
                        grid.dt,
                        grid.dt.sqrt(),
                        &mut next,
                        &mut scratch,
                    )
                    .unwrap();
                    s[0] = next[0];
                    assert_eq!(batch.path(p).at(m + 1, 0).to_bits(), s[0].to_bits());
                }
            }
        }
    }
}
