//! The dynamic side: value function, Föllmer drift, Cole–Hopf heat
//! solution, Gibbs measures `Q_{w,t}`, the marginal flow, and
//! bridge-energy estimates.
//!
//! Everything is computed through the Feynman–Kac representation: with
//! `Ψ* = Ψ(·; μ*)` cached once, the value function is
//!
//! `V(w,t) = −τ·log ∫ φ_{τ(1−t)}(v−w)·exp(−(β/τ)Ψ*(v)) dv`
//!
//! (up to an additive constant that never enters the dynamics), the drift
//! is `u = −∇V = −β·∫∇Ψ* dQ_{w,t}`, and the marginal of the controlled
//! process is `ρ̂_t(w) ∝ φ_{τt}(w)·h(w,t)` with `h = exp(−V/τ)`.
//! The Gaussian integrals use Gauss–Hermite quadrature centered at `w`,
//! which stays accurate for every `t`; only the grid representation of
//! `Q_{w,t}` carries a resolution guard.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{integrate_paths, InitLaw, PathConfig};
use crate::error::{Error, Result};
use crate::free_energy::{FixedPointSolution, RegularizationParams};
use crate::measures::{GridMeasure, ParticleEnsemble};
use crate::numeric::{gauss_hermite, linear_fit, pairwise_sum, UniformTable};
use crate::problem::{MeasureRef, ProblemInstance};
use crate::rng::stream;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Quadrature and cache configuration for the value-function field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    pub gh_order: usize,
    /// Nodes of the Ψ/∇Ψ cache tables.
    pub cache_nodes: usize,
    /// Nodes of the per-step drift tabulation used by `eval_many`.
    pub drift_table_nodes: usize,
    /// Interpolation error budget enforced at construction.
    pub interp_budget: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { gh_order: 32, cache_nodes: 16_385, drift_table_nodes: 2_049, interp_budget: 1e-6 }
    }
}

/// The value function `V*` of the controlled problem, with everything the
/// drift and marginal formulas need cached: `Ψ(·;μ*)`, `∇Ψ(·;μ*)`, and the
/// Gauss–Hermite rule.
#[derive(Debug)]
pub struct ValueFunctionField {
    prob: ProblemInstance,
    params: RegularizationParams,
    mu_star: GridMeasure,
    /// f̂(xⱼ; μ*) at the data nodes; makes Ψ exact at any w in O(#nodes).
    f_hat_star: Vec<f64>,
    psi_table: UniformTable,
    grad_psi_table: UniformTable,
    gh_nodes: Vec<f64>,
    gh_weights: Vec<f64>,
    /// Drift switches to the analytic t→1 limit when τ(1−t) < this.
    switch_threshold: f64,
    /// log h(0,0) = log Z*, the Feynman–Kac normalization.
    log_h00: f64,
    provenance: u64,
    cfg: BridgeConfig,
}

impl ValueFunctionField {
    pub fn new(prob: &ProblemInstance, sol: &FixedPointSolution, cfg: BridgeConfig) -> Result<Self> {
        let params = sol.params;
        let mu_star = sol.mu_star.clone();
        let f_hat_star = prob.f_hat_nodes(MeasureRef::Grid(&mu_star))?;
        let (gh_nodes, gh_weights) = gauss_hermite(cfg.gh_order);
        // cache reach: particles roam within the solution box; GH nodes add
        // √(2τ)·ξ_max on top
        let reach = mu_star.spec().l + (2.0 * params.tau).sqrt() * gh_nodes.last().unwrap() + 0.5;
        let psi_table = UniformTable::tabulate(-reach, reach, cfg.cache_nodes, |w| {
            prob.psi_with_f_hat(w, &f_hat_star).unwrap_or(f64::NAN)
        });
        let grad_psi_table = UniformTable::tabulate(-reach, reach, cfg.cache_nodes, |w| {
            prob.grad_psi_with_f_hat(w, &f_hat_star).unwrap_or(f64::NAN)
        });
        let h = mu_star.spacing();
        let mut vf = Self {
            prob: prob.clone(),
            params,
            mu_star,
            f_hat_star,
            psi_table,
            grad_psi_table,
            gh_nodes,
            gh_weights,
            switch_threshold: h * h / 4.0,
            log_h00: 0.0,
            provenance: sol.provenance_hash(),
            cfg,
        };
        let budget = vf.interpolation_error(512);
        if budget > cfg.interp_budget {
            return Err(Error::Numerical {
                context: alloc::format!(
                    "psi cache interpolation error {budget:e} exceeds budget {:e}",
                    cfg.interp_budget
                ),
            });
        }
        vf.log_h00 = vf.log_h(0.0, 0.0);
        Ok(vf)
    }

    pub fn params(&self) -> RegularizationParams {
        self.params
    }

    pub fn problem(&self) -> &ProblemInstance {
        &self.prob
    }

    pub fn mu_star(&self) -> &GridMeasure {
        &self.mu_star
    }

    pub fn provenance(&self) -> u64 {
        self.provenance
    }

    pub fn switch_threshold(&self) -> f64 {
        self.switch_threshold
    }

    /// Max cache-vs-exact error over a probe scan (enforced at startup).
    pub fn interpolation_error(&self, probes: usize) -> f64 {
        let mut worst: f64 = 0.0;
        let lo = self.psi_table.lo();
        let hi = self.psi_table.hi();
        for k in 0..probes {
            let w = lo + (hi - lo) * (k as f64 + 0.37) / probes as f64;
            let exact = self.prob.psi_with_f_hat(w, &self.f_hat_star).unwrap_or(f64::NAN);
            worst = worst.max((self.psi_table.eval(w) - exact).abs());
            let exact_g = self.prob.grad_psi_with_f_hat(w, &self.f_hat_star).unwrap_or(f64::NAN);
            worst = worst.max((self.grad_psi_table.eval(w) - exact_g).abs());
        }
        worst
    }

    /// Ψ(w; μ*), exact (O(#data) quadrature).
    pub fn psi_exact(&self, w: f64) -> f64 {
        self.prob.psi_with_f_hat(w, &self.f_hat_star).unwrap_or(f64::NAN)
    }

    /// ∇Ψ(w; μ*), exact.
    pub fn grad_psi_exact(&self, w: f64) -> f64 {
        self.prob.grad_psi_with_f_hat(w, &self.f_hat_star).unwrap_or(f64::NAN)
    }

    #[inline]
    fn psi_cached(&self, w: f64) -> f64 {
        if self.psi_table.covers(w) {
            self.psi_table.eval(w)
        } else {
            self.psi_exact(w)
        }
    }

    #[inline]
    fn grad_psi_cached(&self, w: f64) -> f64 {
        if self.grad_psi_table.covers(w) {
            self.grad_psi_table.eval(w)
        } else {
            self.grad_psi_exact(w)
        }
    }

    /// log h(w, t) with h the Cole–Hopf transform; stabilized log-sum-exp
    /// over the Gauss–Hermite rule.
    fn log_h(&self, w: f64, t: f64) -> f64 {
        let ratio = self.params.beta / self.params.tau;
        let s2 = self.params.tau * (1.0 - t);
        if s2 <= 0.0 {
            return -ratio * self.psi_cached(w);
        }
        let scale = (2.0 * s2).sqrt();
        let mut exponents = Vec::with_capacity(self.gh_nodes.len());
        let mut m = f64::NEG_INFINITY;
        for &xi in &self.gh_nodes {
            let e = -ratio * self.psi_cached(w + scale * xi);
            m = m.max(e);
            exponents.push(e);
        }
        let mut acc = 0.0;
        for (e, &gw) in exponents.iter().zip(&self.gh_weights) {
            acc += gw * (e - m).exp();
        }
        m + (acc / core::f64::consts::PI.sqrt()).ln()
    }

    /// `V*(w, t)`, standardized so the w-independent terminal constants are
    /// dropped; only ∇V* enters the dynamics. At t = 1 this is βΨ(w; μ*).
    pub fn value(&self, w: f64, t: f64) -> f64 {
        -self.params.tau * self.log_h(w, t)
    }

    /// Cole–Hopf transform `h(w,t) = exp(−V*(w,t)/τ)`; solves the backward
    /// heat equation `∂ₜh = −(τ/2)Δh`.
    pub fn cole_hopf_h(&self, w: f64, t: f64) -> f64 {
        self.log_h(w, t).exp()
    }

    /// The Föllmer drift `u(w,t) = −β·∫∇Ψ(v;μ*) Q_{w,t}(dv)`; below the
    /// resolution threshold it returns the analytic t→1 limit `−β∇Ψ(w;μ*)`.
    pub fn drift(&self, w: f64, t: f64) -> f64 {
        let beta = self.params.beta;
        if beta == 0.0 {
            return 0.0;
        }
        let s2 = self.params.tau * (1.0 - t);
        if s2 < self.switch_threshold {
            return -beta * self.grad_psi_cached(w);
        }
        let ratio = beta / self.params.tau;
        let scale = (2.0 * s2).sqrt();
        let n = self.gh_nodes.len();
        let mut exponents = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        let mut m = f64::NEG_INFINITY;
        for &xi in &self.gh_nodes {
            let v = w + scale * xi;
            let e = -ratio * self.psi_cached(v);
            m = m.max(e);
            exponents.push(e);
            grads.push(self.grad_psi_cached(v));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            let g = self.gh_weights[k] * (exponents[k] - m).exp();
            den += g;
            num += g * grads[k];
        }
        -beta * num / den
    }

    /// Second moment of `Q_{w,t}` about `w`, by the same quadrature as the
    /// drift (valid for all t; exactly 0 at t = 1).
    pub fn q_second_moment(&self, w: f64, t: f64) -> f64 {
        let s2 = self.params.tau * (1.0 - t);
        if s2 <= 0.0 {
            return 0.0;
        }
        let ratio = self.params.beta / self.params.tau;
        let scale_sq = 2.0 * s2;
        let n = self.gh_nodes.len();
        let mut exponents = Vec::with_capacity(n);
        let mut m = f64::NEG_INFINITY;
        for &xi in &self.gh_nodes {
            let v = w + scale_sq.sqrt() * xi;
            let e = -ratio * self.psi_cached(v);
            m = m.max(e);
            exponents.push(e);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            let g = self.gh_weights[k] * (exponents[k] - m).exp();
            den += g;
            num += g * scale_sq * self.gh_nodes[k] * self.gh_nodes[k];
        }
        num / den
    }

    /// `Q_{w,t}` as a density on the μ*-grid. Guarded: the grid must
    /// resolve the Gaussian factor (τ(1−t) ≥ h²/4).
    pub fn gibbs_measure_q(&self, w: f64, t: f64) -> Result<GridMeasure> {
        let s2 = self.params.tau * (1.0 - t);
        if s2 < self.switch_threshold {
            return Err(Error::ResolutionGuard {
                context: "gibbs_measure_q: kernel under-resolved; use the analytic t->1 limit",
                need: self.switch_threshold,
                have: s2,
            });
        }
        let spec = self.mu_star.spec();
        let ratio = self.params.beta / self.params.tau;
        let log_density: Vec<f64> = (0..spec.n)
            .map(|i| {
                let v = spec.node(i);
                -(v - w) * (v - w) / (2.0 * s2) - ratio * self.psi_cached(v)
            })
            .collect();
        let m = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = GridMeasure::from_values_1d(
            spec,
            log_density.iter().map(|e| (e - m).exp()).collect::<Vec<f64>>(),
        );
        out.normalize();
        Ok(out)
    }

    /// Un-renormalized marginal density of the optimal process,
    /// `ρ̂_t(w) = φ_{τt}(w)·h(w,t)/h(0,0)`; exact solution of the
    /// Fokker–Planck equation, used directly in the PDE residual checks.
    pub fn marginal_density_raw(&self, w: f64, t: f64) -> f64 {
        let tt = self.params.tau * t;
        let log_gauss = -w * w / (2.0 * tt) - 0.5 * (2.0 * core::f64::consts::PI * tt).ln();
        (log_gauss + self.log_h(w, t) - self.log_h00).exp()
    }

    /// The marginal `μ̂_t` on the μ*-grid, renormalized; the renormalization
    /// drift is logged and must stay below 1e-3. `t = 1` reproduces μ*.
    pub fn bridge_marginal_density(&self, t: f64) -> Result<GridMeasure> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidArgument {
                context: "bridge_marginal_density needs t in (0, 1]; t = 0 is the Dirac initial condition",
            });
        }
        let tt = self.params.tau * t;
        let spec = self.mu_star.spec();
        let h = spec.spacing();
        if tt < h * h / 4.0 {
            return Err(Error::ResolutionGuard {
                context: "bridge_marginal_density: grid cannot resolve the early-time marginal",
                need: h * h / 4.0,
                have: tt,
            });
        }
        let mut out = GridMeasure::from_fn_1d(spec, |w| self.marginal_density_raw(w, t));
        let drift = (out.integral() - 1.0).abs();
        log::debug!("bridge_marginal_density(t={t}): renormalization drift {drift:e}");
        if drift > 1e-3 {
            return Err(Error::Numerical {
                context: alloc::format!("marginal at t={t} renormalization drift {drift:e} > 1e-3"),
            });
        }
        out.normalize();
        Ok(out)
    }

    /// Per-data-node means `f̂(xⱼ; μ̂_t)` of the marginal flow, by
    /// Gauss–Hermite against the dominating Gaussian, solid at every t
    /// including times too early for the grid to resolve. `t = 0` is δ₀.
    pub fn marginal_f_hat_nodes(&self, t: f64) -> Vec<f64> {
        let (xs, _) = self.prob.data_nodes();
        let act = self.prob.activation();
        if t <= 0.0 {
            return xs.iter().map(|&x| act.eval(x, 0.0)).collect();
        }
        let tt = self.params.tau * t;
        let scale = (2.0 * tt).sqrt();
        let n = self.gh_nodes.len();
        // weights ∝ e^{−ξ²}·h(w,t) with w = √(2τt)·ξ
        let mut lw = Vec::with_capacity(n);
        let mut m = f64::NEG_INFINITY;
        for &xi in &self.gh_nodes {
            let w = scale * xi;
            let e = self.log_h(w, t);
            m = m.max(e);
            lw.push(e);
        }
        let g: Vec<f64> = (0..n).map(|k| self.gh_weights[k] * (lw[k] - m).exp()).collect();
        let den: f64 = g.iter().sum();
        xs.iter()
            .map(|&x| {
                let num: f64 =
                    (0..n).map(|k| g[k] * act.eval(x, scale * self.gh_nodes[k])).sum();
                num / den
            })
            .collect()
    }

    /// log Z* as seen by the Feynman–Kac normalization h(0,0).
    pub fn log_z(&self) -> f64 {
        self.log_h00
    }
}

/// An evaluable drift `(w, t) → ℝ`.
#[derive(Debug, Clone)]
pub struct DriftField {
    kind: DriftKind,
    vf: Option<Arc<ValueFunctionField>>,
    provenance: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    Zero,
    /// `−β∇Ψ(w; μ*)`, the greedy approximation (no conditional averaging).
    Greedy,
    /// `−∇V*(w,t)`, the Föllmer drift.
    Follmer,
    /// The Föllmer drift in rescaled time: `ũ(w,s) = u(w, s/τ)/τ` on `[0, τ]`.
    RescaledFollmer,
}

impl DriftField {
    pub fn zero() -> Self {
        Self { kind: DriftKind::Zero, vf: None, provenance: 0 }
    }

    pub fn follmer(vf: Arc<ValueFunctionField>) -> Self {
        let provenance = vf.provenance();
        Self { kind: DriftKind::Follmer, vf: Some(vf), provenance }
    }

    pub fn greedy(vf: Arc<ValueFunctionField>) -> Self {
        let provenance = vf.provenance();
        Self { kind: DriftKind::Greedy, vf: Some(vf), provenance }
    }

    /// Time-rescaled variant per the scale invariance of Brownian motion:
    /// run with unit diffusion on [0, τ].
    pub fn rescaled(vf: Arc<ValueFunctionField>) -> Self {
        let provenance = vf.provenance();
        Self { kind: DriftKind::RescaledFollmer, vf: Some(vf), provenance }
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            DriftKind::Zero => "zero",
            DriftKind::Greedy => "greedy",
            DriftKind::Follmer => "follmer",
            DriftKind::RescaledFollmer => "follmer-rescaled",
        }
    }

    pub fn provenance(&self) -> u64 {
        self.provenance
    }

    pub fn value_field(&self) -> Option<&Arc<ValueFunctionField>> {
        self.vf.as_ref()
    }

    pub fn eval(&self, w: f64, t: f64) -> f64 {
        match self.kind {
            DriftKind::Zero => 0.0,
            DriftKind::Greedy => {
                let vf = self.vf.as_ref().unwrap();
                -vf.params().beta * vf.grad_psi_cached(w)
            }
            DriftKind::Follmer => self.vf.as_ref().unwrap().drift(w, t),
            DriftKind::RescaledFollmer => {
                let vf = self.vf.as_ref().unwrap();
                vf.drift(w, t / vf.params().tau) / vf.params().tau
            }
        }
    }

    /// Vectorized evaluation at a shared time. The Föllmer kinds tabulate
    /// `u(·, t)` once on a uniform grid and interpolate, which is what makes
    /// large-ensemble simulation affordable; points outside the table fall
    /// back to direct evaluation.
    pub fn eval_many(&self, ws: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(ws.len(), out.len());
        match self.kind {
            DriftKind::Zero => out.fill(0.0),
            DriftKind::Greedy => {
                let vf = self.vf.as_ref().unwrap();
                let beta = vf.params().beta;
                for (o, &w) in out.iter_mut().zip(ws) {
                    *o = -beta * vf.grad_psi_cached(w);
                }
            }
            DriftKind::Follmer | DriftKind::RescaledFollmer => {
                let vf = self.vf.as_ref().unwrap();
                let (tt, scale) = match self.kind {
                    DriftKind::Follmer => (t, 1.0),
                    _ => (t / vf.params().tau, 1.0 / vf.params().tau),
                };
                if ws.len() < 64 {
                    for (o, &w) in out.iter_mut().zip(ws) {
                        *o = scale * vf.drift(w, tt);
                    }
                    return;
                }
                let a = vf.mu_star().spec().l;
                let table =
                    UniformTable::tabulate(-a, a, vf.cfg.drift_table_nodes, |w| vf.drift(w, tt));
                for (o, &w) in out.iter_mut().zip(ws) {
                    *o = if table.covers(w) {
                        scale * table.eval(w)
                    } else {
                        scale * vf.drift(w, tt)
                    };
                }
            }
        }
    }
}

/// Monte Carlo estimate of the bridge energy `E[½∫‖u‖²dt]` and of the
/// total control cost along Euler–Maruyama paths of the optimal SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeEnergyReport {
    pub energy: f64,
    pub energy_se: f64,
    /// energy + (β/2)·R_N(terminal ensemble)
    pub total_cost: f64,
    pub total_cost_se: f64,
    pub terminal_risk: f64,
    pub n_paths: usize,
    pub n_steps: usize,
}

/// The energy integrand uses the midpoint of each step in time (matching
/// the Euler–Maruyama order); paths are delegated to [`crate::dynamics`].
pub fn bridge_energy(
    drift: &DriftField,
    prob: &ProblemInstance,
    tau: f64,
    beta: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<BridgeEnergyReport> {
    let eta = 1.0 / n_steps as f64;
    let mut path_energy = vec![0.0f64; n_paths];
    let mut mid = vec![0.0f64; n_paths];
    let cfg = PathConfig {
        n_particles: n_paths,
        n_steps,
        horizon: 1.0,
        diffusion: tau.sqrt(),
        init: InitLaw::Zeros,
        seed,
        noise_refine: 1,
        stream_id: stream::BROWNIAN,
    };
    let terminal = integrate_paths(drift, &cfg, |k, t, states| {
        if k == n_steps {
            return;
        }
        drift.eval_many(states, t + 0.5 * eta, &mut mid);
        for (e, &u) in path_energy.iter_mut().zip(mid.iter()) {
            *e += 0.5 * u * u * eta;
        }
    })?;
    let mean = pairwise_sum(&path_energy) / n_paths as f64;
    let var = path_energy.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
        / (n_paths as f64 - 1.0);
    let se = (var / n_paths as f64).sqrt();
    let terminal_risk = prob.risk_of_ensemble(&terminal)?;
    Ok(BridgeEnergyReport {
        energy: mean,
        energy_se: se,
        total_cost: mean + 0.5 * beta * terminal_risk,
        total_cost_se: se,
        terminal_risk,
        n_paths,
        n_steps,
    })
}

/// One bin of the conditional-drift check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftBin {
    pub center: f64,
    pub n_paths: usize,
    pub conditional_mean: f64,
    pub drift_value: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDriftReport {
    pub t_probe: f64,
    pub bins: Vec<DriftBin>,
    pub fraction_within_3sigma: f64,
    pub pass: bool,
}

/// Verifies `u(w, t) = E[−β∇Ψ(W₁; μ*) | W_t = w]` by binning simulated
/// paths on `W_t` (equal-count bins, each ≥ 200 paths) and comparing the
/// bin mean of `−β∇Ψ(W₁)` against the drift at the bin centroid.
pub fn conditional_drift_check(
    vf: &Arc<ValueFunctionField>,
    t_probe: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ConditionalDriftReport> {
    let drift = DriftField::follmer(vf.clone());
    let k_probe = (t_probe * n_steps as f64).round() as usize;
    let mut probe_states = vec![0.0f64; n_paths];
    let cfg = PathConfig {
        n_particles: n_paths,
        n_steps,
        horizon: 1.0,
        diffusion: vf.params().tau.sqrt(),
        init: InitLaw::Zeros,
        seed,
        noise_refine: 1,
        stream_id: stream::BROWNIAN,
    };
    let terminal = integrate_paths(&drift, &cfg, |k, _t, states| {
        if k == k_probe {
            probe_states.copy_from_slice(states);
        }
    })?;
    let beta = vf.params().beta;
    let mut idx: Vec<usize> = (0..n_paths).collect();
    idx.sort_unstable_by(|&a, &b| probe_states[a].total_cmp(&probe_states[b]));
    let per_bin = (n_paths / 50).max(200);
    let n_bins = (n_paths / per_bin).max(1);
    let t_eff = k_probe as f64 / n_steps as f64;
    let mut bins = Vec::with_capacity(n_bins);
    let mut within = 0usize;
    for b in 0..n_bins {
        let lo = b * per_bin;
        let hi = if b == n_bins - 1 { n_paths } else { (b + 1) * per_bin };
        let members = &idx[lo..hi];
        if members.len() < 200 {
            log::debug!("conditional_drift_check: bin {b} skipped ({} paths)", members.len());
            continue;
        }
        let n = members.len() as f64;
        let centroid = members.iter().map(|&i| probe_states[i]).sum::<f64>() / n;
        let vals: Vec<f64> =
            members.iter().map(|&i| -beta * vf.grad_psi_exact(terminal.scalar(i))).collect();
        let mean = pairwise_sum(&vals) / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let u = vf.drift(centroid, t_eff);
        let z = if se > 0.0 { (mean - u) / se } else { 0.0 };
        if z.abs() <= 3.0 {
            within += 1;
        }
        bins.push(DriftBin {
            center: centroid,
            n_paths: members.len(),
            conditional_mean: mean,
            drift_value: u,
            z,
        });
    }
    let fraction = within as f64 / bins.len().max(1) as f64;
    Ok(ConditionalDriftReport {
        t_probe,
        bins,
        fraction_within_3sigma: fraction,
        pass: fraction >= 0.95,
    })
}

/// Second-moment trace of `Q_{w,t}` along a time grid with the
/// linear-in-(1−t) fit of the concentration lemma.
#[derive(Debug, Clone, PartialEq)]
pub struct QMomentReport {
    /// (w, t, m(w,t)) rows.
    pub rows: Vec<(f64, f64, f64)>,
    pub nonincreasing: bool,
    /// Fitted slope a of m ≈ a·(1−t), averaged across probes.
    pub fitted_a: f64,
    pub worst_r2: f64,
}

pub fn q_second_moment_check(
    vf: &ValueFunctionField,
    w_probes: &[f64],
    t_grid: &[f64],
) -> QMomentReport {
    let mut rows = Vec::new();
    let mut nonincreasing = true;
    let mut slopes = Vec::new();
    let mut worst_r2: f64 = 1.0;
    for &w in w_probes {
        let mut prev = f64::INFINITY;
        let mut one_minus_t = Vec::new();
        let mut ms = Vec::new();
        for &t in t_grid {
            let m = vf.q_second_moment(w, t);
            if m > prev + 1e-12 {
                nonincreasing = false;
            }
            prev = m;
            rows.push((w, t, m));
            one_minus_t.push(1.0 - t);
            ms.push(m);
        }
        let fit = linear_fit(&one_minus_t, &ms);
        slopes.push(fit.slope);
        worst_r2 = worst_r2.min(fit.r2);
    }
    let fitted_a = pairwise_sum(&slopes) / slopes.len().max(1) as f64;
    QMomentReport { rows, nonincreasing, fitted_a, worst_r2 }
}

/// Terminal ensemble of the rescaled dynamics (unit diffusion on [0, τ]).
pub fn simulate_rescaled_terminal(
    vf: &Arc<ValueFunctionField>,
    n_particles: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let drift = DriftField::rescaled(vf.clone());
    let cfg = PathConfig {
        n_particles,
        n_steps,
        horizon: vf.params().tau,
        diffusion: 1.0,
        init: InitLaw::Zeros,
        seed,
        noise_refine: 1,
        stream_id: stream::BROWNIAN,
    };
    integrate_paths(&drift, &cfg, |_, _, _| {})
}
