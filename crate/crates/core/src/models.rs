//! Discrete-time price dynamics
//! `dS = mu(t,S) dt + sigma(t,S) sqrt(dt) xi` and the correlated-noise
//! machinery behind them.
//!
//! Correlated noise is handled by diagonalising the correlation matrix
//! `C = sum_k lambda_k v_k v_k^T` and driving each asset with the
//! independent factors `sqrt(lambda_k) v_k`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, validation, Error, Result};
use crate::portfolio::DiscountCurve;

/// Small dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension {
                    what: "matrix row",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.cols.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                what: "matrix product",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Symmetric positive semidefinite noise correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    matrix: Matrix,
}

impl CovarianceSpec {
    /// Checks shape, finiteness and symmetry. Definiteness is checked when
    /// the matrix is diagonalised.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let matrix = Matrix::from_rows(rows)?;
        if matrix.rows() != matrix.cols() || matrix.rows() == 0 {
            return Err(validation(format!(
                "correlation matrix must be square and non-empty, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        if matrix.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(validation("correlation matrix has non-finite entries"));
        }
        let n = matrix.rows();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(validation(format!(
                        "correlation matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Matrix::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Eigenpairs of a correlation matrix, eigenvalues descending, eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenDecomposition {
    /// The k-th eigenvector.
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.vectors.rows())
            .map(|i| self.vectors[(i, k)])
            .collect()
    }

    /// `sum_k lambda_k v_k v_k^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.vectors.rows();
        let mut m = Matrix::zeros(n, n);
        for (k, &lam) in self.values.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += lam * self.vectors[(i, k)] * self.vectors[(j, k)];
                }
            }
        }
        m
    }
}

/// Cyclic Jacobi eigen-solver for a symmetric matrix. Returns the raw
/// eigenvalues (unsorted) and eigenvectors as columns.
pub(crate) fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a
        .as_slice()
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-12 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Diagonalise a correlation matrix.
///
/// Eigenvalues come back sorted descending; those within `1e-10 * max|λ|`
/// of zero (including slightly negative ones) are clamped to exactly zero.
/// Each eigenvector is signed so that its first non-negligible component is
/// positive.
pub fn diagonalize_covariance(c: &CovarianceSpec) -> Result<EigenDecomposition> {
    let n = c.dim();
    let (raw, vecs) = jacobi_eigen(c.matrix());
    let max_abs = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = PSD_TOL * max_abs;
    if let Some(bad) = raw.iter().copied().find(|&l| l < -tol) {
        return Err(validation(format!(
            "correlation matrix is indefinite: eigenvalue {bad:e} below tolerance {:e}",
            -tol
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let lam = raw[src];
        values.push(if lam.abs() <= tol { 0.0 } else { lam });
        let mut col: Vec<f64> = (0..n).map(|i| vecs[(i, src)]).collect();
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for i in 0..n {
            vectors[(i, k)] = col[i];
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Noise loading `Z_{ak} = z_a sqrt(lambda_k) v_a^{(k)}`, keeping only the
/// factors with positive eigenvalue (so `K` may be less than `N`). If every
/// eigenvalue vanishes a single zero column is returned.
pub fn volatility_matrix(z: &[f64], eig: &EigenDecomposition) -> Result<Matrix> {
    let n = eig.vectors.rows();
    if z.len() != n {
        return Err(Error::Dimension {
            what: "per-asset volatilities",
            expected: n,
            got: z.len(),
        });
    }
    let factors: Vec<usize> = (0..eig.values.len())
        .filter(|&k| eig.values[k] > 0.0)
        .collect();
    let k_dim = factors.len().max(1);
    let mut out = Matrix::zeros(n, k_dim);
    for (col, &k) in factors.iter().enumerate() {
        let s = eig.values[k].sqrt();
        for a in 0..n {
            out[(a, col)] = z[a] * s * eig.vectors[(a, k)];
        }
    }
    Ok(out)
}

/// User-defined dynamics. `vol` writes an `N x K` row-major matrix.
///
/// A time-dependent correlation is expressed by building the loading from a
/// fresh [`CovarianceSpec`] inside `vol` for each evaluation time.
pub trait CustomDynamics: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, t: f64, s: &[f64], out: &mut [f64]);
    fn vol(&self, t: f64, s: &[f64], out: &mut [f64]);
    /// Stable description used for hashing and reports.
    fn describe(&self) -> String;
}

/// The drift/volatility law of a model.
#[derive(Clone)]
pub enum Dynamics {
    /// `mu_a dt + sigma_a sqrt(dt) xi`.
    Brownian {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
    /// `mu_a S_a dt + sigma_a S_a sqrt(dt) xi`.
    Geometric {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
    /// `a (b - S) dt + sigma sqrt(dt) xi`.
    Vasicek {
        a: Vec<f64>,
        b: Vec<f64>,
        sigma: Vec<f64>,
    },
    /// One-dimensional drift and absolute volatility tabulated against the
    /// price, linearly interpolated and held flat outside the table.
    LocalGrid {
        s: Vec<f64>,
        drift: Vec<f64>,
        vol: Vec<f64>,
    },
    Custom(Arc<dyn CustomDynamics>),
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Brownian { mu, sigma } => write!(f, "Brownian{{mu:{mu:?},sigma:{sigma:?}}}"),
            Dynamics::Geometric { mu, sigma } => {
                write!(f, "Geometric{{mu:{mu:?},sigma:{sigma:?}}}")
            }
            Dynamics::Vasicek { a, b, sigma } => {
                write!(f, "Vasicek{{a:{a:?},b:{b:?},sigma:{sigma:?}}}")
            }
            Dynamics::LocalGrid { s, .. } => write!(f, "LocalGrid{{{} nodes}}", s.len()),
            Dynamics::Custom(c) => write!(f, "Custom({})", c.describe()),
        }
    }
}

/// Complete model: dynamics, noise correlation and an optional risk-neutral
/// drift override. Immutable and cheap to clone.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    dynamics: Dynamics,
    correlation: Option<CovarianceSpec>,
    // N x K unit loading sqrt(lambda_k) v_k; None means independent noise
    loading: Option<Matrix>,
    risk_neutral: Option<DiscountCurve>,
}

fn check_len(what: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension {
            what,
            expected: n,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(validation(format!("{name} must be finite")));
    }
    Ok(())
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    check_finite("sigma", sigma)?;
    if let Some(s) = sigma.iter().find(|&&s| s < 0.0) {
        return Err(domain(format!("volatility must be >= 0, got {s}")));
    }
    Ok(())
}

impl ModelSpec {
    pub fn brownian(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_len("sigma", &sigma, mu.len())?;
        check_finite("mu", &mu)?;
        check_sigma(&sigma)?;
        if mu.is_empty() {
            return Err(validation("model dimension must be positive"));
        }
        Ok(Self::from_dynamics(Dynamics::Brownian { mu, sigma }))
    }

    pub fn geometric(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_len("sigma", &sigma, mu.len())?;
        check_finite("mu", &mu)?;
        check_sigma(&sigma)?;
        if mu.is_empty() {
            return Err(validation("model dimension must be positive"));
        }
        Ok(Self::from_dynamics(Dynamics::Geometric { mu, sigma }))
    }

    pub fn vasicek(a: Vec<f64>, b: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_len("b", &b, a.len())?;
        check_len("sigma", &sigma, a.len())?;
        check_finite("a", &a)?;
        check_finite("b", &b)?;
        check_sigma(&sigma)?;
        if a.is_empty() {
            return Err(validation("model dimension must be positive"));
        }
        if let Some(x) = a.iter().find(|&&x| x <= 0.0) {
            return Err(domain(format!("mean-reversion speed must be > 0, got {x}")));
        }
        Ok(Self::from_dynamics(Dynamics::Vasicek { a, b, sigma }))
    }

    pub fn local_grid(s: Vec<f64>, drift: Vec<f64>, vol: Vec<f64>) -> Result<Self> {
        if s.len() < 2 {
            return Err(validation("custom grid needs at least two nodes"));
        }
        check_len("drift", &drift, s.len())?;
        check_len("vol", &vol, s.len())?;
        check_finite("s", &s)?;
        check_finite("drift", &drift)?;
        check_sigma(&vol)?;
        if s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(validation("custom grid nodes must be strictly increasing"));
        }
        Ok(Self::from_dynamics(Dynamics::LocalGrid { s, drift, vol }))
    }

    pub fn custom(dynamics: Arc<dyn CustomDynamics>) -> Result<Self> {
        if dynamics.dim() == 0 || dynamics.noise_dim() == 0 {
            return Err(validation("custom dynamics need positive dimensions"));
        }
        Ok(Self::from_dynamics(Dynamics::Custom(dynamics)))
    }

    fn from_dynamics(dynamics: Dynamics) -> Self {
        Self {
            dynamics,
            correlation: None,
            loading: None,
            risk_neutral: None,
        }
    }

    /// Correlate the noise of a built-in multi-asset model.
    pub fn with_correlation(mut self, c: CovarianceSpec) -> Result<Self> {
        if matches!(self.dynamics, Dynamics::Custom(_)) {
            return Err(validation(
                "custom dynamics carry their own volatility matrix",
            ));
        }
        check_len("correlation", &vec![0.0; c.dim()], self.dim())?;
        let eig = diagonalize_covariance(&c)?;
        let loading = volatility_matrix(&vec![1.0; c.dim()], &eig)?;
        self.loading = Some(loading);
        self.correlation = Some(c);
        Ok(self)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn correlation(&self) -> Option<&CovarianceSpec> {
        self.correlation.as_ref()
    }

    pub fn risk_neutral_curve(&self) -> Option<&DiscountCurve> {
        self.risk_neutral.as_ref()
    }

    pub(crate) fn with_risk_neutral_drift(mut self, curve: DiscountCurve) -> Self {
        self.risk_neutral = Some(curve);
        self
    }

    pub fn dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Brownian { mu, .. } | Dynamics::Geometric { mu, .. } => mu.len(),
            Dynamics::Vasicek { a, .. } => a.len(),
            Dynamics::LocalGrid { .. } => 1,
            Dynamics::Custom(c) => c.dim(),
        }
    }

    pub(crate) fn loading(&self) -> Option<&Matrix> {
        self.loading.as_ref()
    }

    pub fn noise_dim(&self) -> usize {
        match (&self.dynamics, &self.loading) {
            (Dynamics::Custom(c), _) => c.noise_dim(),
            (_, Some(l)) => l.cols(),
            _ => self.dim(),
        }
    }

    /// True when every drift and volatility is proportional to its price,
    /// so that replacing the drift by `r S` keeps the model's form.
    pub fn is_price_homogeneous(&self) -> bool {
        matches!(self.dynamics, Dynamics::Geometric { .. })
    }

    /// True for models whose prices stay strictly positive.
    pub fn is_positive_process(&self) -> bool {
        matches!(self.dynamics, Dynamics::Geometric { .. })
    }

    fn scales(&self, s: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::Brownian { sigma, .. } | Dynamics::Vasicek { sigma, .. } => {
                out.copy_from_slice(sigma)
            }
            Dynamics::Geometric { sigma, .. } => {
                for a in 0..sigma.len() {
                    out[a] = sigma[a] * s[a];
                }
            }
            Dynamics::LocalGrid { s: nodes, vol, .. } => {
                out[0] = crate::numerics::interp_linear(nodes, vol, s[0]);
            }
            Dynamics::Custom(_) => unreachable!("custom models supply their own matrix"),
        }
    }

    /// Drift vector `mu(t, S)`.
    pub fn drift(&self, t: f64, s: &[f64], out: &mut [f64]) {
        if let Some(curve) = &self.risk_neutral {
            let r = curve.rate_at(t);
            for a in 0..out.len() {
                out[a] = r * s[a];
            }
            return;
        }
        match &self.dynamics {
            Dynamics::Brownian { mu, .. } => out.copy_from_slice(mu),
            Dynamics::Geometric { mu, .. } => {
                for a in 0..mu.len() {
                    out[a] = mu[a] * s[a];
                }
            }
            Dynamics::Vasicek { a, b, .. } => {
                for i in 0..a.len() {
                    out[i] = a[i] * (b[i] - s[i]);
                }
            }
            Dynamics::LocalGrid {
                s: nodes, drift, ..
            } => {
                out[0] = crate::numerics::interp_linear(nodes, drift, s[0]);
            }
            Dynamics::Custom(c) => c.drift(t, s, out),
        }
    }

    /// Volatility matrix `sigma(t, S)` (`N x K`, row-major).
    pub fn vol(&self, t: f64, s: &[f64], out: &mut [f64]) {
        if let Dynamics::Custom(c) = &self.dynamics {
            c.vol(t, s, out);
            return;
        }
        let n = self.dim();
        let k = self.noise_dim();
        let mut scale = [0.0; 16];
        let mut heap;
        let scale: &mut [f64] = if n <= 16 {
            &mut scale[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        self.scales(s, scale);
        match &self.loading {
            None => {
                out[..n * k].iter_mut().for_each(|x| *x = 0.0);
                for a in 0..n {
                    out[a * k + a] = scale[a];
                }
            }
            Some(l) => {
                for a in 0..n {
                    for j in 0..k {
                        out[a * k + j] = scale[a] * l[(a, j)];
                    }
                }
            }
        }
    }

    pub fn drift_vec(&self, t: f64, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift(t, s, &mut out);
        out
    }

    pub fn vol_matrix(&self, t: f64, s: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(self.dim(), self.noise_dim());
        self.vol(t, s, &mut m.data);
        m
    }

    /// Scalar drift of a one-dimensional model.
    pub fn drift1(&self, t: f64, s: f64) -> f64 {
        let mut out = [0.0];
        self.drift(t, &[s], &mut out);
        out[0]
    }

    /// Effective scalar volatility `sqrt(sum_k sigma_{0k}^2)` of a
    /// one-dimensional model.
    pub fn vol1(&self, t: f64, s: f64) -> f64 {
        let k = self.noise_dim();
        let mut buf = [0.0; 16];
        let mut heap;
        let out: &mut [f64] = if k <= 16 {
            &mut buf[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        self.vol(t, &[s], out);
        if k == 1 {
            out[0].abs()
        } else {
            out.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
    }

    pub fn require_one_dimensional(&self) -> Result<()> {
        if self.dim() != 1 {
            return Err(validation(format!(
                "operation needs a one-dimensional model, got dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Serializable description, when the model is a built-in.
    pub fn config(&self) -> Option<ModelConfig> {
        let params = match &self.dynamics {
            Dynamics::Brownian { mu, sigma } => ModelParams::Bm {
                mu: mu.clone().into(),
                sigma: sigma.clone().into(),
            },
            Dynamics::Geometric { mu, sigma } => ModelParams::Gbm {
                mu: mu.clone().into(),
                sigma: sigma.clone().into(),
            },
            Dynamics::Vasicek { a, b, sigma } => ModelParams::Vasicek {
                a: a.clone().into(),
                b: b.clone().into(),
                sigma: sigma.clone().into(),
            },
            Dynamics::LocalGrid { s, drift, vol } => ModelParams::CustomGrid {
                s: s.clone(),
                drift: drift.clone(),
                vol: vol.clone(),
            },
            Dynamics::Custom(_) => return None,
        };
        Some(ModelConfig {
            params,
            correlation: self.correlation.as_ref().map(|c| c.matrix().to_rows()),
            risk_neutral: self.risk_neutral.as_ref().map(DiscountCurve::points),
        })
    }

    /// Hex digest identifying the model configuration.
    pub fn hash(&self) -> String {
        let text = match self.config() {
            Some(cfg) => serde_json::to_string(&cfg).expect("model config serializes"),
            None => match &self.dynamics {
                Dynamics::Custom(c) => format!(
                    "custom:{}:{}",
                    c.describe(),
                    serde_json::to_string(&self.risk_neutral.as_ref().map(DiscountCurve::points))
                        .expect("curve serializes")
                ),
                _ => unreachable!(),
            },
        };
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let mut model = match &cfg.params {
            ModelParams::Bm { mu, sigma } => {
                let n = mu.len().max(sigma.len());
                ModelSpec::brownian(mu.expand(n)?, sigma.expand(n)?)?
            }
            ModelParams::Gbm { mu, sigma } => {
                let n = mu.len().max(sigma.len());
                ModelSpec::geometric(mu.expand(n)?, sigma.expand(n)?)?
            }
            ModelParams::Vasicek { a, b, sigma } => {
                let n = a.len().max(b.len()).max(sigma.len());
                ModelSpec::vasicek(a.expand(n)?, b.expand(n)?, sigma.expand(n)?)?
            }
            ModelParams::CustomGrid { s, drift, vol } => {
                ModelSpec::local_grid(s.clone(), drift.clone(), vol.clone())?
            }
        };
        if let Some(rows) = &cfg.correlation {
            model = model.with_correlation(CovarianceSpec::new(rows)?)?;
        }
        if let Some(points) = &cfg.risk_neutral {
            model = model.with_risk_neutral_drift(DiscountCurve::piecewise(points)?);
        }
        Ok(model)
    }
}

/// A number or a per-asset list of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn len(&self) -> usize {
        match self {
            ScalarOrVec::Scalar(_) => 1,
            ScalarOrVec::Vector(v) => v.len(),
        }
    }

    fn expand(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(x) => Ok(vec![*x; n]),
            ScalarOrVec::Vector(v) if v.len() == n => Ok(v.clone()),
            ScalarOrVec::Vector(v) if v.len() == 1 => Ok(vec![v[0]; n]),
            ScalarOrVec::Vector(v) => Err(Error::Dimension {
                what: "model parameter",
                expected: n,
                got: v.len(),
            }),
        }
    }
}

impl From<Vec<f64>> for ScalarOrVec {
    fn from(v: Vec<f64>) -> Self {
        if v.len() == 1 {
            ScalarOrVec::Scalar(v[0])
        } else {
            ScalarOrVec::Vector(v)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "kebab-case")]
pub enum ModelParams {
    Bm {
        mu: ScalarOrVec,
        sigma: ScalarOrVec,
    },
    Gbm {
        mu: ScalarOrVec,
        sigma: ScalarOrVec,
    },
    Vasicek {
        a: ScalarOrVec,
        b: ScalarOrVec,
        sigma: ScalarOrVec,
    },
    CustomGrid {
        s: Vec<f64>,
        drift: Vec<f64>,
        vol: Vec<f64>,
    },
}

/// JSON model description:
/// `{"type": "bm"|"gbm"|"vasicek"|"custom-grid", "params": {...}, "correlation": [[...]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_neutral: Option<Vec<crate::portfolio::CurvePoint>>,
}

/// Arithmetic Brownian motion with constant drift and volatility.
pub fn make_bm(mu: f64, sigma: f64) -> Result<ModelSpec> {
    ModelSpec::brownian(vec![mu], vec![sigma])
}

/// Geometric Brownian motion.
pub fn make_gbm(mu: f64, sigma: f64) -> Result<ModelSpec> {
    ModelSpec::geometric(vec![mu], vec![sigma])
}

/// Mean-reverting Vasicek process `dS = a(b - S)dt + sigma dW`.
pub fn make_vasicek(a: f64, b: f64, sigma: f64) -> Result<ModelSpec> {
    ModelSpec::vasicek(vec![a], vec![b], vec![sigma])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_eigen() {
        let eig = diagonalize_covariance(&CovarianceSpec::identity(3)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
        assert!(eig.reconstruct().max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn rank_one_eigen() {
        let c = CovarianceSpec::new(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let eig = diagonalize_covariance(&c).unwrap();
        assert_relative_eq!(eig.values[0], 2.0, epsilon = 1e-14);
        assert_eq!(eig.values[1], 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = eig.vector(0);
        let v1 = eig.vector(1);
        assert!((v0[0] - h).abs() < 1e-14 && (v0[1] - h).abs() < 1e-14);
        assert!((v1[0] - h).abs() < 1e-14 && (v1[1] + h).abs() < 1e-14);
        let z = volatility_matrix(&[1.0, 1.0], &eig).unwrap();
        assert_eq!(z.cols(), 1);
    }

    #[test]
    fn half_correlation_eigen() {
        // characteristic polynomial (1-l)^2 - 1/4 = 0 -> l = 1 +- 1/2
        let c = CovarianceSpec::new(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let eig = diagonalize_covariance(&c).unwrap();
        assert_relative_eq!(eig.values[0], 1.5, epsilon = 1e-14);
        assert_relative_eq!(eig.values[1], 0.5, epsilon = 1e-14);
        let z = volatility_matrix(&[0.2, 0.3], &eig).unwrap();
        let zzt = z.matmul(&z.transpose()).unwrap();
        let expect = Matrix::from_rows(&[vec![0.04, 0.03], vec![0.03, 0.09]]).unwrap();
        assert!(zzt.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn scalar_volatility_matrix() {
        let eig = diagonalize_covariance(&CovarianceSpec::identity(1)).unwrap();
        let z = volatility_matrix(&[0.37], &eig).unwrap();
        assert_eq!(z.as_slice(), &[0.37]);
        assert!(volatility_matrix(&[0.1, 0.2], &eig).is_err());
    }

    #[test]
    fn rejects_bad_correlations() {
        assert!(CovarianceSpec::new(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        let indefinite = CovarianceSpec::new(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let err = diagonalize_covariance(&indefinite).unwrap_err().to_string();
        assert!(err.contains("-1"), "{err}");
    }

    #[test]
    fn built_in_maps() {
        let bm = make_bm(0.0, 1.0).unwrap();
        for s in [-5.0, 0.0, 3.0] {
            assert_eq!(bm.drift1(0.3, s), 0.0);
        }
        let gbm = make_gbm(0.05, 0.2).unwrap();
        assert_relative_eq!(gbm.vol1(0.0, 100.0), 20.0, epsilon = 1e-13);
        assert_relative_eq!(gbm.drift1(0.0, 100.0), 5.0, epsilon = 1e-13);
        let vas = make_vasicek(1.0, 0.03, 0.01).unwrap();
        assert_eq!(vas.drift1(0.0, 0.03), 0.0);
        assert_eq!(vas.vol1(0.0, 0.5), 0.01);
        assert!(make_gbm(0.0, -0.1).is_err());
        assert!(make_vasicek(0.0, 0.0, 0.1).is_err());
        assert!(make_vasicek(-1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn correlated_gbm_covariance() {
        let c = CovarianceSpec::new(&[vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let m = ModelSpec::geometric(vec![0.0, 0.0], vec![0.2, 0.4])
            .unwrap()
            .with_correlation(c)
            .unwrap();
        let z = m.vol_matrix(0.0, &[10.0, 20.0]);
        let zzt = z.matmul(&z.transpose()).unwrap();
        // (sigma_a S_a)(sigma_b S_b) C_ab
        assert_relative_eq!(zzt[(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(zzt[(1, 1)], 64.0, epsilon = 1e-12);
        assert_relative_eq!(zzt[(0, 1)], 0.3 * 2.0 * 8.0, epsilon = 1e-12);
    }

    #[test]
    fn local_grid_interpolates() {
        let m = ModelSpec::local_grid(vec![0.0, 1.0], vec![0.0, 1.0], vec![0.1, 0.3]).unwrap();
        assert_relative_eq!(m.drift1(0.0, 0.25), 0.25);
        assert_relative_eq!(m.vol1(0.0, 0.5), 0.2);
        assert_relative_eq!(m.vol1(0.0, 7.0), 0.3);
    }

    #[test]
    fn config_round_trip_and_hash() {
        let text = r#"{"type": "gbm", "params": {"mu": 0.05, "sigma": 0.2}}"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        let m = ModelSpec::from_config(&cfg).unwrap();
        assert_eq!(m.dim(), 1);
        assert_eq!(m.config().unwrap(), cfg);
        assert_eq!(m.hash(), make_gbm(0.05, 0.2).unwrap().hash());
        assert_ne!(m.hash(), make_gbm(0.05, 0.21).unwrap().hash());

        let text = r#"{"type": "bm", "params": {"mu": [0, 0], "sigma": 1},
                       "correlation": [[1, 0.2], [0.2, 1]]}"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        let m = ModelSpec::from_config(&cfg).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.noise_dim(), 2);

        let bad = r#"{"type": "vasicek", "params": {"a": 0, "b": 0, "sigma": 1}}"#;
        let cfg: ModelConfig = serde_json::from_str(bad).unwrap();
        assert!(ModelSpec::from_config(&cfg).is_err());
    }

    #[test]
    fn maps_are_pure() {
        let c = CovarianceSpec::new(&[vec![1.0, 0.7], vec![0.7, 1.0]]).unwrap();
        let m = ModelSpec::vasicek(vec![1.0, 2.0], vec![0.1, 0.2], vec![0.3, 0.1])
            .unwrap()
            .with_correlation(c)
            .unwrap();
        let s = [0.123, -0.5];
        let a = (m.drift_vec(0.7, &s), m.vol_matrix(0.7, &s));
        let b = (m.drift_vec(0.7, &s), m.vol_matrix(0.7, &s));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.as_slice(), b.1.as_slice());
    }
}
