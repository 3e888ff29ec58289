//! Independent brute-force and analytic oracles.
//!
//! Everything here is deliberately slow and simple, and reimplements its
//! quantity from the primitive evaluators (target, activation, data nodes)
//! rather than calling the main-path quadrature kernels. Oracles run in
//! tests and in the `verify` command, never in hot paths.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::measures::{GridMeasure, ParticleEnsemble};
use crate::problem::ProblemInstance;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// One oracle-vs-main comparison, ready for JSONL serialization upstream.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub main_value: f64,
    pub oracle_value: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// `pass` is defined as absolute error within tolerance, or relative
    /// error within tolerance for values of magnitude above one.
    pub fn evaluate(name: &str, main_value: f64, oracle_value: f64, tolerance: f64) -> Self {
        let abs_err = (main_value - oracle_value).abs();
        let scale = oracle_value.abs().max(1.0);
        let rel_err = abs_err / scale;
        Self {
            name: String::from(name),
            main_value,
            oracle_value,
            abs_err,
            rel_err,
            tolerance,
            pass: abs_err <= tolerance * scale,
        }
    }
}

/// Midpoint Riemann sum of `g` over `[a, b]`.
pub(crate) fn midpoint_integral(a: f64, b: f64, n: usize, mut g: impl FnMut(f64) -> f64) -> f64 {
    let dx = (b - a) / n as f64;
    let mut acc = 0.0;
    for m in 0..n {
        acc += g(a + (m as f64 + 0.5) * dx);
    }
    acc * dx
}

/// Dense Riemann-sum oracle for `f̃(w) = −E_π[f(X)σ(X;w)]` with π uniform
/// on the problem's data box.
pub fn dense_riemann_f_tilde(prob: &ProblemInstance, w: f64, n_points: usize) -> f64 {
    let (a, b) = prob.data_box();
    let act = prob.activation();
    let val = midpoint_integral(a, b, n_points, |x| prob.target().eval(x) * act.eval(x, w));
    -val / (b - a)
}

/// Dense Riemann-sum oracle for `K(w, w')`.
pub fn dense_riemann_k(prob: &ProblemInstance, w: f64, w2: f64, n_points: usize) -> f64 {
    let (a, b) = prob.data_box();
    let act = prob.activation();
    midpoint_integral(a, b, n_points, |x| act.eval(x, w) * act.eval(x, w2)) / (b - a)
}

/// Nested dense-quadrature oracle for `Ψ(w; γτ)`: the outer integral over
/// the Gaussian uses a midpoint rule on `[−8√τ, 8√τ]`, the inner kernels
/// use dense Riemann sums.
pub fn nested_quadrature_psi(
    prob: &ProblemInstance,
    w: f64,
    tau: f64,
    n_outer: usize,
    n_inner: usize,
) -> f64 {
    let l = 8.0 * tau.sqrt();
    let norm = (2.0 * core::f64::consts::PI * tau).sqrt();
    let interaction = midpoint_integral(-l, l, n_outer, |v| {
        dense_riemann_k(prob, w, v, n_inner) * (-v * v / (2.0 * tau)).exp() / norm
    });
    dense_riemann_f_tilde(prob, w, n_inner) + interaction
}

/// Pointwise-definition risk oracle: `∫π(dx)|f − f̂(·;μ)|²` with `f̂`
/// integrated by an explicit trapezoid loop over the grid.
pub fn pointwise_risk(prob: &ProblemInstance, mu: &GridMeasure) -> f64 {
    let (xs, ws) = prob.data_nodes();
    let act = prob.activation();
    let spec = mu.spec();
    let h = spec.spacing();
    let mut total = 0.0;
    for (j, (&x, &pw)) in xs.iter().zip(ws).enumerate() {
        let mut f_hat = 0.0;
        for i in 0..mu.len() {
            let weight = if i == 0 || i == mu.len() - 1 { 0.5 * h } else { h };
            f_hat += weight * mu.density_at(i) * act.eval(x, spec.node(i));
        }
        let d = prob.f_at_node(j) - f_hat;
        total += pw * d * d;
    }
    total
}

/// O(N²) double-sum risk oracle per the kernel expansion
/// `R₀ + (2/N)Σᵢ f̃(wⁱ) + (1/N²)ΣᵢΣⱼ K(wⁱ, wʲ)`, with `f̃` and `K`
/// reimplemented as naive loops over the data nodes.
pub fn double_sum_risk(prob: &ProblemInstance, e: &ParticleEnsemble) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let (xs, ws) = prob.data_nodes();
    let act = prob.activation();
    let naive_f_tilde = |w: f64| -> f64 {
        let mut acc = 0.0;
        for (j, (&x, &pw)) in xs.iter().zip(ws).enumerate() {
            acc -= pw * prob.f_at_node(j) * act.eval(x, w);
        }
        acc
    };
    let naive_k = |w: f64, w2: f64| -> f64 {
        let mut acc = 0.0;
        for (&x, &pw) in xs.iter().zip(ws) {
            acc += pw * act.eval(x, w) * act.eval(x, w2);
        }
        acc
    };
    let n = e.len();
    let mut lin = 0.0;
    for i in 0..n {
        lin += naive_f_tilde(e.scalar(i));
    }
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += naive_k(e.scalar(i), e.scalar(j));
        }
    }
    Ok(prob.r0() + 2.0 * lin / n as f64 + quad / (n as f64 * n as f64))
}

/// From-scratch Boltzmann map: naive loops and explicit trapezoid sums,
/// independent of the solver's kernel caches. Used to certify converged
/// fixed points under an independently implemented map evaluation.
pub fn boltzmann_map_dense(
    prob: &ProblemInstance,
    beta: f64,
    tau: f64,
    mu: &GridMeasure,
) -> GridMeasure {
    let spec = mu.spec();
    let h = spec.spacing();
    let n = spec.n;
    let act = prob.activation();
    let (xs, pw) = prob.data_nodes();
    let mut f_hat = vec![0.0; xs.len()];
    for (j, &x) in xs.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..n {
            let wgt = if i == 0 || i == n - 1 { 0.5 * h } else { h };
            acc += wgt * mu.density_at(i) * act.eval(x, spec.node(i));
        }
        f_hat[j] = if prob.zero_interaction() { 0.0 } else { acc };
    }
    let mut density = vec![0.0; n];
    for (i, d) in density.iter_mut().enumerate() {
        let w = spec.node(i);
        let mut psi = 0.0;
        for (j, &x) in xs.iter().enumerate() {
            psi += pw[j] * act.eval(x, w) * (f_hat[j] - prob.f_at_node(j));
        }
        *d = (-beta / tau * psi - w * w / (2.0 * tau)).exp();
    }
    let mut out = GridMeasure::from_values_1d(spec, density);
    out.normalize();
    out
}

/// Central finite difference of a scalar function.
pub fn finite_difference_gradient(g: impl Fn(f64) -> f64, w: f64, step: f64) -> f64 {
    (g(w + step) - g(w - step)) / (2.0 * step)
}

/// Richardson-extrapolated central difference (one halving).
pub fn finite_difference_richardson(g: impl Fn(f64) -> f64, w: f64, step: f64) -> f64 {
    let c1 = finite_difference_gradient(&g, w, step);
    let c2 = finite_difference_gradient(&g, w, step / 2.0);
    (4.0 * c2 - c1) / 3.0
}

/// Exact W₂ between equal-size ensembles by exhaustive search over all N!
/// pairings. N ≤ 8.
pub fn brute_force_assignment_w2(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "brute_force_assignment_w2",
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n > 8 {
        return Err(Error::InvalidArgument { context: "brute force limited to N <= 8" });
    }
    let sq = |i: usize, j: usize| -> f64 {
        a.particle(i)
            .iter()
            .zip(b.particle(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let cost_of = |perm: &[usize], sq: &dyn Fn(usize, usize) -> f64| -> f64 {
        perm.iter().enumerate().map(|(i, &j)| sq(i, j)).sum()
    };
    best = best.min(cost_of(&perm, &sq));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost_of(&perm, &sq));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).sqrt())
}

/// Which PDE a field is checked against. All three come from the same
/// forward–backward system: the backward heat equation for the Cole–Hopf
/// transform, the HJB equation for the value function, and the
/// Fokker–Planck equation for the marginal flow.
pub enum PdeField<'a> {
    /// ∂ₜh + (τ/2)·Δh = 0
    BackwardHeat { h: &'a dyn Fn(f64, f64) -> f64 },
    /// ∂ₜV + (τ/2)·ΔV − ½‖∇V‖² = 0
    Hjb { v: &'a dyn Fn(f64, f64) -> f64 },
    /// ∂ₜρ − ∇·(ρ∇V) − (τ/2)·Δρ = 0
    FokkerPlanck {
        rho: &'a dyn Fn(f64, f64) -> f64,
        v: &'a dyn Fn(f64, f64) -> f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeResidualLevel {
    pub dw: f64,
    pub dt: f64,
    pub sup: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeResidualReport {
    pub levels: Vec<PdeResidualLevel>,
    /// Fitted convergence order of the sup norm (log–log slope vs dw).
    pub order_sup: f64,
    pub order_l2: f64,
}

/// Centered-difference PDE residuals on a fixed probe lattice across
/// `refinements` halvings of the stencil spacing, plus fitted orders.
pub fn pde_residual(
    field: &PdeField<'_>,
    tau: f64,
    w_range: (f64, f64),
    t_range: (f64, f64),
    base_dw: f64,
    base_dt: f64,
    refinements: usize,
) -> PdeResidualReport {
    assert!(refinements >= 3, "need >= 3 refinement levels for an order fit");
    let probes_w = 9;
    let probes_t = 7;
    let mut levels = Vec::with_capacity(refinements);
    for r in 0..refinements {
        let dw = base_dw / (1 << r) as f64;
        let dt = base_dt / (1 << r) as f64;
        let mut sup: f64 = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for iw in 0..probes_w {
            // keep stencils strictly inside the domain at the coarsest level
            let w = w_range.0
                + (w_range.1 - w_range.0) * (iw as f64 + 1.0) / (probes_w as f64 + 1.0);
            for it in 0..probes_t {
                let t = t_range.0
                    + (t_range.1 - t_range.0) * (it as f64 + 1.0) / (probes_t as f64 + 1.0);
                let res = match field {
                    PdeField::BackwardHeat { h } => {
                        let dt_term = (h(w, t + dt) - h(w, t - dt)) / (2.0 * dt);
                        let lap = (h(w + dw, t) - 2.0 * h(w, t) + h(w - dw, t)) / (dw * dw);
                        dt_term + 0.5 * tau * lap
                    }
                    PdeField::Hjb { v } => {
                        let dt_term = (v(w, t + dt) - v(w, t - dt)) / (2.0 * dt);
                        let lap = (v(w + dw, t) - 2.0 * v(w, t) + v(w - dw, t)) / (dw * dw);
                        let grad = (v(w + dw, t) - v(w - dw, t)) / (2.0 * dw);
                        dt_term + 0.5 * tau * lap - 0.5 * grad * grad
                    }
                    PdeField::FokkerPlanck { rho, v } => {
                        let dt_term = (rho(w, t + dt) - rho(w, t - dt)) / (2.0 * dt);
                        let vw = |x: f64| (v(x + dw, t) - v(x - dw, t)) / (2.0 * dw);
                        let flux = |x: f64| rho(x, t) * vw(x);
                        let div = (flux(w + dw) - flux(w - dw)) / (2.0 * dw);
                        let lap = (rho(w + dw, t) - 2.0 * rho(w, t) + rho(w - dw, t)) / (dw * dw);
                        dt_term - div - 0.5 * tau * lap
                    }
                };
                sup = sup.max(res.abs());
                sumsq += res * res;
                count += 1;
            }
        }
        levels.push(PdeResidualLevel { dw, dt, sup, l2: (sumsq / count as f64).sqrt() });
    }
    let dws: Vec<f64> = levels.iter().map(|l| l.dw).collect();
    let sups: Vec<f64> = levels.iter().map(|l| l.sup.max(1e-300)).collect();
    let l2s: Vec<f64> = levels.iter().map(|l| l.l2.max(1e-300)).collect();
    let order_sup = crate::numeric::log_log_fit(&dws, &sups).slope;
    let order_l2 = crate::numeric::log_log_fit(&dws, &l2s).slope;
    PdeResidualReport { levels, order_sup, order_l2 }
}

/// One-sample Kolmogorov–Smirnov statistic against an evaluable CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut xs = samples.to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((f - i as f64 / n).abs());
    }
    Ok(d)
}

/// Asymptotic one-sample KS threshold at the 99% level.
pub fn ks_threshold_99(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}
