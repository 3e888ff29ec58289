//! Shared numerical utilities: pairwise reductions, log-sum-exp, the
//! normal CDF/quantile pair, cubic table interpolation, and least squares.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Pairwise (cascade) summation.
///
/// Error grows like O(log n) instead of O(n) for naive accumulation, and a
/// fixed reduction tree makes parallel callers bitwise-reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n if n <= 16 => {
            let mut acc = 0.0;
            for v in values {
                acc += v;
            }
            acc
        }
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Pairwise sum after sorting by total order, so the result is invariant
/// under permutations of the input. Used where bit-identical symmetry is
/// part of the contract (risk of an ensemble).
pub fn pairwise_sum_sorted(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    pairwise_sum(values)
}

/// log Σ exp(xᵢ), stabilized by the max.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut acc = 0.0;
    for &v in values {
        acc += (v - m).exp();
    }
    m + acc.ln()
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal CDF via erfc; accurate over the full double range.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Inverse standard normal CDF.
///
/// Acklam's rational approximation (~1.15e-9 relative) followed by one
/// Halley step against [`norm_cdf`], which brings it to ~1 ulp.
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_quantile needs p in (0,1), got {p}");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement: e = Φ(x) − p, u = e/φ(x).
    let e = norm_cdf(x) - p;
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Values tabulated on a uniform abscissa with 4-point (cubic Lagrange)
/// interpolation; O(h⁴) error for smooth functions.
#[derive(Debug, Clone)]
pub struct UniformTable {
    x0: f64,
    dx: f64,
    values: Vec<f64>,
}

impl UniformTable {
    pub fn new(x0: f64, dx: f64, values: Vec<f64>) -> Self {
        assert!(values.len() >= 4 && dx > 0.0);
        Self { x0, dx, values }
    }

    /// Tabulate `f` on `n` nodes spanning `[lo, hi]`.
    pub fn tabulate(lo: f64, hi: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> Self {
        assert!(n >= 4 && hi > lo);
        let dx = (hi - lo) / (n - 1) as f64;
        let values = (0..n).map(|i| f(lo + i as f64 * dx)).collect();
        Self { x0: lo, dx, values }
    }

    pub fn lo(&self) -> f64 {
        self.x0
    }

    pub fn hi(&self) -> f64 {
        self.x0 + self.dx * (self.values.len() - 1) as f64
    }

    pub fn covers(&self, x: f64) -> bool {
        x >= self.lo() && x <= self.hi()
    }

    /// Cubic interpolation; the stencil is shifted near the ends.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let s = (x - self.x0) / self.dx;
        let i = (s.floor() as isize).clamp(1, n as isize - 3) as usize;
        let t = s - i as f64; // position relative to node i, in [−1, 2] off the ends
        let (y0, y1, y2, y3) = (
            self.values[i - 1],
            self.values[i],
            self.values[i + 1],
            self.values[i + 2],
        );
        // Lagrange weights for nodes at −1, 0, 1, 2.
        let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        w0 * y0 + w1 * y1 + w2 * y2 + w3 * y3
    }
}

/// Ordinary least squares fit y ≈ slope·x + intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "linear fit needs at least two points");
    let n = xs.len() as f64;
    let mx = pairwise_sum(xs) / n;
    let my = pairwise_sum(ys) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit { slope, intercept, r2 }
}

/// Log–log slope fit, the workhorse for scaling-law checks.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// FNV-1a hash, used for provenance tags on exported artifacts.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration on the
/// Legendre recurrence. Weights sum to 2.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = alloc::vec![0.0; n];
    let mut weights = alloc::vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss–Hermite nodes and weights for ∫ f(ξ)·e^{−ξ²} dξ; weights sum to √π.
///
/// Newton iteration on the physicists' Hermite recurrence with the classic
/// root-walking initial guesses.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 2);
    let n = order;
    let mut nodes = alloc::vec![0.0; n];
    let mut weights = alloc::vec![0.0; n];
    let pim4 = 0.751_125_544_464_943; // π^{−1/4}
    let m = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[n - 1],
            3 => 1.91 * z - 0.91 * nodes[n - 2],
            _ => 2.0 * z - nodes[n - i + 1],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = z;
        nodes[i] = -z;
        let w = 2.0 / (pp * pp);
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let v = [1.0, 2.0, 3.0, 4.5];
        assert_eq!(pairwise_sum(&v), 10.5);
    }

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let mut a = [0.1, 1e16, -1e16, 0.2, 7.0];
        let mut b = [7.0, -1e16, 0.2, 0.1, 1e16];
        assert_eq!(pairwise_sum_sorted(&mut a).to_bits(), pairwise_sum_sorted(&mut b).to_bits());
    }

    #[test]
    fn norm_quantile_inverts_cdf() {
        for &p in &[1e-10, 1e-4, 0.025, 0.5, 0.7, 0.975, 1.0 - 1e-6] {
            let z = norm_quantile(p);
            assert_relative_eq!(norm_cdf(z), p, max_relative = 1e-12);
        }
        assert_eq!(norm_quantile(0.5), 0.0);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0, 1000.0];
        assert_relative_eq!(log_sum_exp(&v), 1000.0 + core::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        // degree 15 is exact for order 8
        let val: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert_relative_eq!(val, 2.0 / 15.0, epsilon = 1e-13);
        let total: f64 = w.iter().sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(32);
        let total: f64 = w.iter().sum();
        assert_relative_eq!(total, core::f64::consts::PI.sqrt(), epsilon = 1e-12);
        // ∫ ξ² e^{−ξ²} dξ = √π/2
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_relative_eq!(m2, core::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-12);
        // a genuinely non-polynomial integrand: ∫ cos(ξ) e^{−ξ²} dξ = √π e^{−1/4}
        let c: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert_relative_eq!(c, core::f64::consts::PI.sqrt() * (-0.25f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn cubic_table_hits_budget_on_smooth_function() {
        let t = UniformTable::tabulate(-4.0, 4.0, 4097, |x| x.tanh());
        let mut worst = 0.0f64;
        for k in 0..1000 {
            let x = -4.0 + 8.0 * (k as f64 + 0.37) / 1000.0;
            worst = worst.max((t.eval(x) - x.tanh()).abs());
        }
        assert!(worst < 1e-10, "cubic interpolation error {worst}");
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let fit = linear_fit(&xs, &ys);
        assert_relative_eq!(fit.slope, 2.0, epsilon = 1e-14);
        assert_relative_eq!(fit.intercept, 1.0, epsilon = 1e-13);
        assert_relative_eq!(fit.r2, 1.0, epsilon = 1e-14);
    }
}
