//! Small numerical kernels shared across modules: order-independent
//! reductions, banded linear solves and grid quadrature.

/// Pairwise (cascade) summation.
///
/// The split points depend only on the slice length, so the result is the
/// same no matter how the values were produced or chunked.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean, unbiased sample variance and standard error of the mean.
pub fn sample_moments(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, var, (var / n as f64).sqrt())
}

/// Sample variance together with the standard error of that variance
/// estimate, from the fourth central moment.
pub fn variance_with_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let (mean, var, _) = sample_moments(values);
    let q: Vec<f64> = values.iter().map(|v| (v - mean).powi(4)).collect();
    let m4 = pairwise_sum(&q) / n;
    let se = ((m4 - var * var).max(0.0) / n).sqrt();
    (var, se)
}

/// Trapezoid rule on an arbitrary increasing abscissa.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let terms: Vec<f64> = x
        .windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .collect();
    pairwise_sum(&terms)
}

/// Trapezoid weights for `n` equally spaced nodes with spacing `h`.
pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    if n > 0 {
        w[0] = 0.5 * h;
        w[n - 1] = 0.5 * h;
    }
    w
}

/// Linear interpolation on increasing nodes; flat outside the range.
pub fn interp_linear(x: &[f64], y: &[f64], at: f64) -> f64 {
    let n = x.len();
    if at <= x[0] {
        return y[0];
    }
    if at >= x[n - 1] {
        return y[n - 1];
    }
    let i = x.partition_point(|&v| v <= at) - 1;
    let w = (at - x[i]) / (x[i + 1] - x[i]);
    y[i] * (1.0 - w) + y[i + 1] * w
}

/// Cubic Lagrange interpolation through the four nodes surrounding `at`
/// (three at the edges fall back to the nearest stencil). Zero outside.
pub fn interp_cubic(x: &[f64], y: &[f64], at: f64) -> f64 {
    let n = x.len();
    if n < 4 {
        return interp_linear(x, y, at);
    }
    if at < x[0] || at > x[n - 1] {
        return 0.0;
    }
    let i = (x.partition_point(|&v| v <= at)).clamp(1, n - 1) - 1;
    let start = i.saturating_sub(1).min(n - 4);
    let xs = &x[start..start + 4];
    let ys = &y[start..start + 4];
    let mut acc = 0.0;
    for j in 0..4 {
        let mut l = 1.0;
        for m in 0..4 {
            if m != j {
                l *= (at - xs[m]) / (xs[j] - xs[m]);
            }
        }
        acc += l * ys[j];
    }
    acc
}

/// Five-point Gauss-Legendre nodes and weights on [-1, 1].
pub const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

/// Integrate `f` over `[a, b]` with five-point Gauss-Legendre.
pub fn gauss5<F: Fn(f64) -> f64>(a: f64, b: f64, f: F) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GAUSS5
        .iter()
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// A tridiagonal system whose first and last rows may reach one node
/// further into the interior (three-point boundary closures).
///
/// Row `i` reads `lower[i] * u[i-1] + diag[i] * u[i] + upper[i] * u[i+1]`,
/// row 0 additionally has `first_extra * u[2]` and the last row
/// `last_extra * u[n-3]`.
#[derive(Debug, Clone)]
pub struct BandedSystem {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub first_extra: f64,
    pub last_extra: f64,
}

impl BandedSystem {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            first_extra: 0.0,
            last_extra: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `out = self * u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut v = self.diag[i] * u[i];
            if i > 0 {
                v += self.lower[i] * u[i - 1];
            }
            if i + 1 < n {
                v += self.upper[i] * u[i + 1];
            }
            out[i] = v;
        }
        if n >= 3 {
            out[0] += self.first_extra * u[2];
            out[n - 1] += self.last_extra * u[n - 3];
        }
    }

    /// Solve `self * u = rhs` in place. Boundary rows carrying an extra
    /// coefficient are substituted into their neighbours, the interior is
    /// solved by the Thomas algorithm, and the boundary values are recovered
    /// last. Extras need at least four unknowns.
    pub fn solve(&self, rhs: &mut [f64]) -> Result<(), &'static str> {
        let n = self.len();
        if n == 0 {
            return Ok(());
        }
        let mut a = self.lower.clone();
        let mut b = self.diag.clone();
        let mut c = self.upper.clone();
        let first = self.first_extra != 0.0;
        let last = self.last_extra != 0.0;
        if (first || last) && n < 4 {
            return Err("boundary extras need at least four unknowns");
        }
        if first {
            if b[0] == 0.0 {
                return Err("zero pivot");
            }
            let m = a[1] / b[0];
            b[1] -= m * c[0];
            c[1] -= m * self.first_extra;
            rhs[1] -= m * rhs[0];
        }
        if last {
            if b[n - 1] == 0.0 {
                return Err("zero pivot");
            }
            let m = c[n - 2] / b[n - 1];
            b[n - 2] -= m * a[n - 1];
            a[n - 2] -= m * self.last_extra;
            rhs[n - 2] -= m * rhs[n - 1];
        }
        let lo = usize::from(first);
        let hi = if last { n - 2 } else { n - 1 };
        for i in lo + 1..=hi {
            if b[i - 1] == 0.0 {
                return Err("zero pivot");
            }
            let m = a[i] / b[i - 1];
            b[i] -= m * c[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        if b[hi] == 0.0 {
            return Err("zero pivot");
        }
        rhs[hi] /= b[hi];
        for i in (lo..hi).rev() {
            rhs[i] = (rhs[i] - c[i] * rhs[i + 1]) / b[i];
        }
        if first {
            rhs[0] = (rhs[0] - c[0] * rhs[1] - self.first_extra * rhs[2]) / b[0];
        }
        if last {
            rhs[n - 1] =
                (rhs[n - 1] - a[n - 1] * rhs[n - 2] - self.last_extra * rhs[n - 3]) / b[n - 1];
        }
        Ok(())
    }
}

/// Evenly spaced nodes computed as `lo + i*h` (no accumulated rounding).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + i as f64 * h })
        .collect()
}

/// Format a float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}
