//! The free energy `F(μ) = ½R(μ) + (τ/β)·D(μ‖γτ)`, its minimizer, and the
//! transport-map experiments.
//!
//! The minimizer is computed as the fixed point of the Boltzmann map
//! `ρ ↦ normalize(exp(−(β/τ)·Ψ(·;ρ))·ργτ)`, which is the exact first-order
//! condition of the trapezoid-discretized free energy, so minimality
//! against discrete perturbations holds by construction once the residual
//! is at tolerance. The iteration is damped Picard in log space with a
//! geometric β-continuation ladder when β/τ is large.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::measures::{
    kl_divergence, wasserstein2_grid_gaussian, GaussianPrior, GridMeasure, GridSpec, Reference,
};
use crate::numeric::{log_sum_exp, pairwise_sum};
use crate::problem::{MeasureRef, ProblemInstance};
use crate::rng::{stream, RngStream};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Inverse temperature β and prior variance τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationParams {
    pub beta: f64,
    pub tau: f64,
}

impl RegularizationParams {
    /// `beta = 0` is allowed (zero drift, prior fixed point); the free-energy
    /// functionals themselves require `beta > 0`.
    pub fn new(beta: f64, tau: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite() && tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument { context: "need beta >= 0 and tau > 0, both finite" });
        }
        Ok(Self { beta, tau })
    }

    fn expect_positive_beta(&self) -> Result<()> {
        if self.beta > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument { context: "free energy needs beta > 0" })
        }
    }

    /// Lazy-training preset: τ = ε²/d, β = √(τd) = ε.
    pub fn lazy(epsilon: f64, d: usize) -> Result<Self> {
        Self::new(epsilon, epsilon * epsilon / d as f64)
    }

    pub fn ratio(&self) -> f64 {
        self.beta / self.tau
    }

    pub fn prior(&self, dim: usize) -> GaussianPrior {
        GaussianPrior::new(self.tau, dim)
    }
}

/// `F(μ) = ½R(μ) + (τ/β)·D(μ‖γτ)`; always nonnegative up to quadrature slack.
pub fn free_energy(prob: &ProblemInstance, params: RegularizationParams, mu: &GridMeasure) -> Result<f64> {
    params.expect_positive_beta()?;
    let r = prob.risk_of_measure(mu)?;
    let d = kl_divergence(mu, Reference::Gaussian(&params.prior(mu.dim())))?;
    Ok(0.5 * r + params.tau / params.beta * d)
}

/// The Mei–Montanari–Nguyen form at arguments (β/τ, 1/β):
/// `½[R(μ) + (1/β)·M₂²(μ)] − (τ/β)·h(μ)`.
///
/// Related to [`free_energy`] by `F(μ) = F_mmn(μ) + (τ·d/2β)·log(2πτ)`.
pub fn mmn_free_energy(prob: &ProblemInstance, params: RegularizationParams, mu: &GridMeasure) -> Result<f64> {
    params.expect_positive_beta()?;
    let r = prob.risk_of_measure(mu)?;
    Ok(0.5 * (r + mu.second_moment() / params.beta) - params.tau / params.beta * mu.differential_entropy())
}

/// Wasserstein-regularized risk `½R(μ) + (1/2β)·W₂²(μ, γτ)`; 1D only.
/// Lower-bounds [`free_energy`] via the Gaussian entropy-transport inequality.
pub fn wasserstein_free_energy(
    prob: &ProblemInstance,
    params: RegularizationParams,
    mu: &GridMeasure,
) -> Result<f64> {
    params.expect_positive_beta()?;
    let r = prob.risk_of_measure(mu)?;
    let w2 = wasserstein2_grid_gaussian(mu, &params.prior(1))?;
    Ok(0.5 * r + w2 * w2 / (2.0 * params.beta))
}

/// Solver initialization for the uniqueness probes.
#[derive(Debug, Clone)]
pub enum InitialGuess {
    Prior,
    Uniform,
    Measure(GridMeasure),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Sup-node residual of ρ under the Boltzmann map.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial damping α of the log-space Picard update.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50_000, damping: 1.0 }
    }
}

/// Converged minimizer of the free energy.
#[derive(Debug, Clone)]
pub struct FixedPointSolution {
    pub mu_star: GridMeasure,
    pub log_z: f64,
    pub residual: f64,
    pub iterations: usize,
    /// (β_k, residual at acceptance) along the continuation path.
    pub trace: Vec<(f64, f64)>,
    pub params: RegularizationParams,
}

impl FixedPointSolution {
    /// Provenance tag over the density bits and parameters.
    pub fn provenance_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * self.mu_star.len() + 16);
        for &d in self.mu_star.density_values() {
            bytes.extend_from_slice(&d.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&self.params.beta.to_bits().to_le_bytes());
        bytes.extend_from_slice(&self.params.tau.to_bits().to_le_bytes());
        crate::numeric::fnv1a64(&bytes)
    }
}

/// σ(xⱼ; wᵢ) for all data nodes and grid nodes, plus trapezoid weights.
struct GridKernels {
    sigma: Vec<f64>, // n_data × n_grid
    trap: Vec<f64>,
    log_prior: Vec<f64>,
    n_grid: usize,
}

impl GridKernels {
    fn build(prob: &ProblemInstance, spec: GridSpec, prior: &GaussianPrior) -> Self {
        let (xs, _) = prob.data_nodes();
        let n_grid = spec.n;
        let mut sigma = Vec::with_capacity(xs.len() * n_grid);
        for &x in xs {
            for i in 0..n_grid {
                sigma.push(prob.activation().eval(x, spec.node(i)));
            }
        }
        let probe = GridMeasure::from_fn_1d(spec, |_| 1.0);
        let trap: Vec<f64> = (0..n_grid).map(|i| probe.trap_weight(i)).collect();
        let log_prior: Vec<f64> = (0..n_grid).map(|i| prior.log_density(&[spec.node(i)])).collect();
        Self { sigma, trap, log_prior, n_grid }
    }

    /// Ψ at every grid node for the density ρ (not necessarily normalized;
    /// the mean is taken against ρ·trap / Σρ·trap).
    fn psi_nodes(&self, prob: &ProblemInstance, rho: &[f64], out: &mut [f64]) {
        let (_, pw) = prob.data_nodes();
        let n = self.n_grid;
        let mass: f64 = (0..n).map(|i| self.trap[i] * rho[i]).sum();
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for j in 0..pw.len() {
            let row = &self.sigma[j * n..(j + 1) * n];
            let f_hat = if prob.zero_interaction() {
                0.0
            } else {
                let s: f64 = (0..n).map(|i| self.trap[i] * rho[i] * row[i]).sum();
                s / mass
            };
            let coeff = pw[j] * (f_hat - prob.f_at_node(j));
            for i in 0..n {
                out[i] += coeff * row[i];
            }
        }
    }
}

/// Solve the Boltzmann fixed point `ρ ∝ exp(−(β/τ)Ψ(·;ρ))·ργτ` on `spec`.
///
/// Preconditions: the grid resolves the prior (`h ≤ √τ/8`) and the prior
/// mass outside the box is below 1e-10.
pub fn solve_boltzmann_fixed_point(
    prob: &ProblemInstance,
    params: RegularizationParams,
    spec: GridSpec,
    cfg: SolverConfig,
    init: InitialGuess,
) -> Result<FixedPointSolution> {
    let prior = params.prior(1);
    let h = spec.spacing();
    let h_max = params.tau.sqrt() / 8.0;
    if h > h_max * (1.0 + 1e-12) {
        return Err(Error::ResolutionGuard { context: "solver grid vs prior", need: h_max, have: h });
    }
    let outside = prior.mass_outside_box(spec.l);
    if outside >= 1e-10 {
        return Err(Error::Numerical {
            context: alloc::format!("prior mass outside grid box is {outside:e} (>= 1e-10); enlarge the box"),
        });
    }

    let kernels = GridKernels::build(prob, spec, &prior);
    let n = spec.n;

    // log-density state, normalized so Σ trap·exp(l) = 1
    let normalize_log = |l: &mut [f64]| {
        let terms: Vec<f64> = (0..n).map(|i| l[i] + kernels.trap[i].ln()).collect();
        let z = log_sum_exp(&terms);
        for v in l.iter_mut() {
            *v -= z;
        }
    };

    let mut l: Vec<f64> = match init {
        InitialGuess::Prior => kernels.log_prior.clone(),
        InitialGuess::Uniform => vec![0.0; n],
        InitialGuess::Measure(m) => {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "solver initial guess",
                    expected: n,
                    got: m.len(),
                });
            }
            m.density_values().iter().map(|&r| r.max(1e-300).ln()).collect()
        }
    };
    normalize_log(&mut l);

    // continuation ladder: geometric from 10τ up to β when β/τ > 10
    let betas: Vec<f64> = if params.ratio() > 10.0 {
        let lo = 10.0 * params.tau;
        let steps = ((params.beta / lo).log2().ceil() as usize + 1).clamp(2, 20);
        (0..steps)
            .map(|k| lo * (params.beta / lo).powf(k as f64 / (steps - 1) as f64))
            .collect()
    } else {
        vec![params.beta]
    };

    let mut trace = Vec::with_capacity(betas.len());
    let mut iterations = 0usize;
    let mut rho = vec![0.0; n];
    let mut psi = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut final_residual = f64::INFINITY;
    let mut log_z = 0.0;

    for (stage, &beta_k) in betas.iter().enumerate() {
        let ratio = beta_k / params.tau;
        let mut alpha = cfg.damping.clamp(1e-3, 1.0);
        let mut prev_res = f64::INFINITY;
        let mut converged = false;
        while iterations < cfg.max_iter {
            iterations += 1;
            for i in 0..n {
                rho[i] = l[i].exp();
            }
            kernels.psi_nodes(prob, &rho, &mut psi);
            for i in 0..n {
                if !psi[i].is_finite() {
                    return Err(Error::NonFinite { context: "psi in Boltzmann map", node: spec.node(i) });
                }
                target[i] = -ratio * psi[i] + kernels.log_prior[i];
            }
            let z_terms: Vec<f64> = (0..n).map(|i| target[i] + kernels.trap[i].ln()).collect();
            let z = log_sum_exp(&z_terms);
            log_z = z;
            let mut res: f64 = 0.0;
            for i in 0..n {
                target[i] -= z;
                res = res.max((target[i].exp() - rho[i]).abs());
            }
            if res <= cfg.tol {
                trace.push((beta_k, res));
                final_residual = res;
                converged = true;
                break;
            }
            if res > prev_res && alpha > 1e-3 {
                alpha = (alpha * 0.5).max(1e-3);
            }
            prev_res = res;
            for i in 0..n {
                l[i] += alpha * (target[i] - l[i]);
            }
            normalize_log(&mut l);
        }
        if !converged {
            trace.push((beta_k, prev_res));
            return Err(Error::NonConvergence { iterations, residual: prev_res, trace });
        }
        let _ = stage;
    }

    let mut mu_star = GridMeasure::from_values_1d(
        spec,
        l.iter().map(|v| v.exp()).collect::<Vec<f64>>(),
    );
    mu_star.normalize();
    // log Z is the normalization against the prior at the final β
    Ok(FixedPointSolution {
        mu_star,
        log_z,
        residual: final_residual,
        iterations,
        trace,
        params,
    })
}

/// Sup-node residual of `mu` under one application of the Boltzmann map.
pub fn boltzmann_map_residual(
    prob: &ProblemInstance,
    params: RegularizationParams,
    mu: &GridMeasure,
) -> Result<f64> {
    let mapped = boltzmann_map(prob, params, mu)?;
    Ok(mu.sup_norm_diff(&mapped))
}

/// One application of the Boltzmann map to a normalized grid measure.
pub fn boltzmann_map(
    prob: &ProblemInstance,
    params: RegularizationParams,
    mu: &GridMeasure,
) -> Result<GridMeasure> {
    mu.expect_normalized("boltzmann_map")?;
    let prior = params.prior(1);
    let spec = mu.spec();
    let f_hat = prob.f_hat_nodes(MeasureRef::Grid(mu))?;
    let ratio = params.ratio();
    let mut log_density = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let psi = prob.psi_with_f_hat(spec.node(i), &f_hat)?;
        log_density.push(-ratio * psi + prior.log_density(&[spec.node(i)]));
    }
    let m = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = GridMeasure::from_values_1d(
        spec,
        log_density.iter().map(|v| (v - m).exp()).collect::<Vec<f64>>(),
    );
    out.normalize();
    Ok(out)
}

/// The quantities asserted by the static bounds: risk/entropy/transport
/// numbers for `μ*` plus the realizable-case bound when `μ°` is known.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticBoundsReport {
    pub risk_star: f64,
    pub free_energy_star: f64,
    pub kl_star: f64,
    pub w2_sq_star: f64,
    /// `(2τ/β)·D(μ°‖γτ)` when μ° is available.
    pub realizable_bound: Option<f64>,
    pub risk_le_twice_fe: bool,
    pub realizable_holds: Option<bool>,
}

pub fn verify_static_bounds(
    prob: &ProblemInstance,
    params: RegularizationParams,
    sol: &FixedPointSolution,
    mu_circ: Option<&GridMeasure>,
) -> Result<StaticBoundsReport> {
    let prior = params.prior(1);
    let risk_star = prob.risk_of_measure(&sol.mu_star)?;
    let fe_star = free_energy(prob, params, &sol.mu_star)?;
    let kl_star = kl_divergence(&sol.mu_star, Reference::Gaussian(&prior))?;
    let w2 = wasserstein2_grid_gaussian(&sol.mu_star, &prior)?;
    let realizable_bound = match mu_circ {
        Some(m) => Some(2.0 * params.tau / params.beta * kl_divergence(m, Reference::Gaussian(&prior))?),
        None => None,
    };
    let risk_le_twice_fe = risk_star <= 2.0 * fe_star + 1e-8;
    let realizable_holds = realizable_bound.map(|b| risk_star <= b + 1e-8);
    Ok(StaticBoundsReport {
        risk_star,
        free_energy_star: fe_star,
        kl_star,
        w2_sq_star: w2 * w2,
        realizable_bound,
        risk_le_twice_fe,
        realizable_holds,
    })
}

/// Minimality probe: smooth multiplicative perturbations and mixture moves
/// of `μ*`. Returns the minimum of `F(μ) − F(μ*)` over all probes.
pub fn minimality_margin(
    prob: &ProblemInstance,
    params: RegularizationParams,
    sol: &FixedPointSolution,
    n_perturbations: usize,
    seed: u64,
    extra_mixture_anchors: &[&GridMeasure],
) -> Result<f64> {
    let spec = sol.mu_star.spec();
    let f_star = free_energy(prob, params, &sol.mu_star)?;
    let s = RngStream::new(seed, stream::PERTURB);
    let mut worst = f64::INFINITY;
    let modes = 8usize;
    for p in 0..n_perturbations {
        let base = (p * 2 * modes) as u64;
        let mut density = Vec::with_capacity(sol.mu_star.len());
        for i in 0..sol.mu_star.len() {
            let w = spec.node(i);
            let mut xi = 0.0;
            for k in 1..=modes {
                let a = 0.3 / k as f64 * s.normal_at(base + 2 * k as u64);
                let b = 0.3 / k as f64 * s.normal_at(base + 2 * k as u64 + 1);
                let arg = k as f64 * core::f64::consts::PI * w / spec.l;
                xi += a * arg.cos() + b * arg.sin();
            }
            density.push(sol.mu_star.density_at(i) * xi.exp());
        }
        let mut mu = GridMeasure::from_values_1d(spec, density);
        mu.normalize();
        worst = worst.min(free_energy(prob, params, &mu)? - f_star);
    }
    let prior_grid = params.prior(1).discretize(spec);
    let uniform = GridMeasure::uniform_1d(spec);
    let mut anchors: Vec<&GridMeasure> = alloc::vec![&prior_grid, &uniform];
    anchors.extend_from_slice(extra_mixture_anchors);
    for nu in anchors {
        for &t in &[0.1, 0.3] {
            let density: Vec<f64> = (0..sol.mu_star.len())
                .map(|i| (1.0 - t) * sol.mu_star.density_at(i) + t * nu.density_at(i))
                .collect();
            let mut mu = GridMeasure::from_values_1d(spec, density);
            mu.normalize();
            worst = worst.min(free_energy(prob, params, &mu)? - f_star);
        }
    }
    Ok(worst)
}

/// Monotone-rearrangement transport map `T = F_μ⁻¹ ∘ F_γ` (1D).
///
/// Both CDFs are the trapezoid CDFs of grid densities on the same grid, so
/// `T` is the identity to machine precision when `μ` is the discretized
/// prior.
#[derive(Debug, Clone)]
pub struct TransportMap1d {
    mu: GridMeasure,
    prior_grid: GridMeasure,
    mu_cdf: Vec<f64>,
    prior_cdf: Vec<f64>,
}

impl TransportMap1d {
    pub fn new(mu_star: &GridMeasure, prior: &GaussianPrior) -> Result<Self> {
        if mu_star.dim() != 1 {
            return Err(Error::DimensionMismatch { context: "transport_map_1d", expected: 1, got: mu_star.dim() });
        }
        mu_star.expect_normalized("transport_map_1d")?;
        let prior_grid = prior.discretize(mu_star.spec());
        let mu_cdf = mu_star.cdf_nodes();
        let prior_cdf = prior_grid.cdf_nodes();
        Ok(Self { mu: mu_star.clone(), prior_grid, mu_cdf, prior_cdf })
    }

    pub fn eval(&self, w: f64) -> f64 {
        self.mu.quantile_with(&self.mu_cdf, self.prior_grid.cdf_with(&self.prior_cdf, w))
    }

    /// Push an ensemble through the map.
    pub fn push(&self, e: &crate::measures::ParticleEnsemble) -> crate::measures::ParticleEnsemble {
        let data: Vec<f64> = (0..e.len()).map(|i| self.eval(e.scalar(i))).collect();
        crate::measures::ParticleEnsemble::new_1d(data)
    }

    /// `E[(T(W) − W)²]` under the grid-discretized prior.
    pub fn mean_square_displacement(&self) -> f64 {
        self.prior_grid.integrate_1d(|w| {
            let d = self.eval(w) - w;
            d * d
        })
    }

    /// Maximum difference quotient over a uniform scan of `[−a, a]`.
    pub fn lipschitz_scan(&self, a: f64, n: usize) -> f64 {
        let mut worst: f64 = 0.0;
        let step = 2.0 * a / n as f64;
        let mut prev = self.eval(-a);
        for i in 1..=n {
            let w = -a + i as f64 * step;
            let cur = self.eval(w);
            worst = worst.max((cur - prev) / step);
            prev = cur;
        }
        worst
    }
}

/// Quantile summary for one corollary quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantitySummary {
    pub mean: f64,
    pub upper_quantile: f64,
}

/// One (N, seed-averaged) row of the transported-net experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Corollary1Row {
    pub n_particles: usize,
    /// ‖f − f̂_N(·; T(W))‖ (L²(π) norm, not squared)
    pub transported_risk: QuantitySummary,
    /// maxᵢ |T(Wⁱ) − Wⁱ|
    pub max_displacement: QuantitySummary,
    /// ‖f̂_N(·;T(W)) − f̂_N(·;W)‖² (squared norm)
    pub coupling_gap_sq: QuantitySummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corollary1Report {
    pub rows: Vec<Corollary1Row>,
    /// ‖f − f̂(·;μ*)‖, the mean-field floor of the transported risk.
    pub risk_floor: f64,
    /// Fitted exponent of (mean transported risk − floor) vs N.
    pub maurey_exponent: f64,
    /// Fitted prefactor a in excess ≈ a·N^exponent.
    pub maurey_prefactor: f64,
    pub delta: f64,
    pub n_seeds: usize,
}

/// Sample `W ~ γτ^⊗N` across seeds, push through the transport map, and
/// summarize the three corollary quantities with their (1−δ) quantiles.
pub fn corollary1_experiment(
    prob: &ProblemInstance,
    params: RegularizationParams,
    sol: &FixedPointSolution,
    n_sweep: &[usize],
    n_seeds: usize,
    delta: f64,
    seed: u64,
) -> Result<Corollary1Report> {
    if n_sweep.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument { context: "corollary1 needs N >= 2" });
    }
    let prior = params.prior(1);
    let map = TransportMap1d::new(&sol.mu_star, &prior)?;
    let risk_floor = prob.risk_of_measure(&sol.mu_star)?.sqrt();
    let mut rows = Vec::with_capacity(n_sweep.len());
    for (ni, &n) in n_sweep.iter().enumerate() {
        let mut q1 = Vec::with_capacity(n_seeds);
        let mut q2 = Vec::with_capacity(n_seeds);
        let mut q3 = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let st = RngStream::new(seed, stream::SAMPLER).substream((ni * n_seeds + s) as u64);
            let w = prior.sample(n, st)?;
            let tw = map.push(&w);
            q1.push(prob.risk_of_ensemble(&tw)?.sqrt());
            let disp = (0..n).map(|i| (tw.scalar(i) - w.scalar(i)).abs()).fold(0.0, f64::max);
            q2.push(disp);
            let fh_w = prob.f_hat_nodes(MeasureRef::Ensemble(&w))?;
            let fh_tw = prob.f_hat_nodes(MeasureRef::Ensemble(&tw))?;
            let (_, pw) = prob.data_nodes();
            let terms: Vec<f64> = pw
                .iter()
                .zip(fh_w.iter().zip(&fh_tw))
                .map(|(&p, (&a, &b))| p * (a - b) * (a - b))
                .collect();
            q3.push(pairwise_sum(&terms));
        }
        let summ = |v: &mut Vec<f64>| {
            v.sort_unstable_by(f64::total_cmp);
            let mean = pairwise_sum(v) / v.len() as f64;
            let idx = (((1.0 - delta) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            QuantitySummary { mean, upper_quantile: v[idx] }
        };
        rows.push(Corollary1Row {
            n_particles: n,
            transported_risk: summ(&mut q1),
            max_displacement: summ(&mut q2),
            coupling_gap_sq: summ(&mut q3),
        });
    }
    // The Maurey term is a high-probability statement, so the fit runs on
    // the (1−δ)-quantile excess over the mean-field floor (the mean excess
    // can even be negative through the Jensen effect on the norm).
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for row in &rows {
        let excess = row.transported_risk.upper_quantile - risk_floor;
        if excess > 0.0 {
            xs.push(row.n_particles as f64);
            ys.push(excess);
        }
    }
    let (maurey_exponent, maurey_prefactor) = if xs.len() >= 2 {
        let fit = crate::numeric::log_log_fit(&xs, &ys);
        (fit.slope, fit.intercept.exp())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Corollary1Report {
        rows,
        risk_floor,
        maurey_exponent,
        maurey_prefactor,
        delta,
        n_seeds,
    })
}
