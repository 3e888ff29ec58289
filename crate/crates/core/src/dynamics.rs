//! Synchronously coupled simulations of the four weight processes:
//! optimal McKean–Vlasov dynamics, interacting particle dynamics, gradient
//! descent, and one-pass SGD, plus the risk-gap decomposition between
//! them.
//!
//! Coupling discipline:
//! * MKV and particle dynamics consume identical Brownian increments and
//!   start at the origin.
//! * GD and SGD are noise-free and share one i.i.d. Gaussian
//!   initialization.
//! * All randomness is addressed by `(seed, stream, particle, step)`
//!   counters, so changing `N` never reshuffles another particle's noise,
//!   and the increments can be generated on a refined lattice to couple
//!   step-halving studies pathwise.

use alloc::vec;
use alloc::vec::Vec;

use crate::bridge::{DriftField, ValueFunctionField};
use crate::error::{Error, Result};
use crate::free_energy::RegularizationParams;
use crate::measures::ParticleEnsemble;
use crate::numeric::pairwise_sum;
use crate::problem::ProblemInstance;
use crate::rng::{stream, RngStream};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Abort threshold on the drift magnitude.
const DRIFT_BLOWUP: f64 = 1e6;

/// Initial law of a path ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitLaw {
    Zeros,
    /// i.i.d. `N(0, τ)` drawn from the shared initialization stream.
    SharedGaussian { tau: f64 },
}

/// Configuration of the generic Euler–Maruyama driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    pub n_particles: usize,
    pub n_steps: usize,
    pub horizon: f64,
    /// Multiplies the Brownian increment (√τ for the standard clock, 1 for
    /// the rescaled one).
    pub diffusion: f64,
    pub init: InitLaw,
    pub seed: u64,
    /// Brownian increments live on a lattice of `n_steps × noise_refine`
    /// sub-steps; a run with (n, refine·2) is pathwise coupled to one with
    /// (2n, refine).
    pub noise_refine: usize,
    pub stream_id: u64,
}

fn initial_states(init: InitLaw, n: usize, seed: u64) -> Vec<f64> {
    match init {
        InitLaw::Zeros => vec![0.0; n],
        InitLaw::SharedGaussian { tau } => {
            let s = RngStream::new(seed, stream::INIT_GAUSS);
            let sd = tau.sqrt();
            (0..n as u64).map(|i| sd * s.normal_at(i)).collect()
        }
    }
}

/// One Brownian increment of variance `eta` for (particle, step), summed
/// over the refinement lattice.
#[inline]
fn brownian_increment(s: &RngStream, eta: f64, refine: usize, step: usize) -> f64 {
    let sub_sd = (eta / refine as f64).sqrt();
    let mut acc = 0.0;
    for j in 0..refine {
        acc += sub_sd * s.normal_at((step * refine + j) as u64);
    }
    acc
}

/// Generic Euler–Maruyama driver:
/// `W_{k+1} = W_k + η·u(W_k, t_k) + diffusion·ΔB_k`.
///
/// `observe(k, t_k, states)` runs before every step and once at the
/// terminal time (`k = n_steps`).
pub fn integrate_paths<F: FnMut(usize, f64, &[f64])>(
    drift: &DriftField,
    cfg: &PathConfig,
    mut observe: F,
) -> Result<ParticleEnsemble> {
    if cfg.n_particles == 0 || cfg.n_steps == 0 || cfg.noise_refine == 0 {
        return Err(Error::InvalidArgument { context: "paths need particles, steps, and refine >= 1" });
    }
    let eta = cfg.horizon / cfg.n_steps as f64;
    let mut states = initial_states(cfg.init, cfg.n_particles, cfg.seed);
    let mut drifts = vec![0.0f64; cfg.n_particles];
    let base = RngStream::new(cfg.seed, cfg.stream_id);
    let particle_streams: Vec<RngStream> =
        (0..cfg.n_particles as u64).map(|i| base.substream(i)).collect();
    for k in 0..cfg.n_steps {
        let t = k as f64 * eta;
        observe(k, t, &states);
        drift.eval_many(&states, t, &mut drifts);
        for (i, (w, &u)) in states.iter_mut().zip(drifts.iter()).enumerate() {
            if !u.is_finite() || u.abs() > DRIFT_BLOWUP {
                return Err(Error::Numerical {
                    context: alloc::format!(
                        "drift blow-up at step {k} (t={t}), particle {i}: u={u:e}, w={w:e}"
                    ),
                });
            }
            *w += eta * u + cfg.diffusion * brownian_increment(&particle_streams[i], eta, cfg.noise_refine, k);
        }
    }
    observe(cfg.n_steps, cfg.horizon, &states);
    let mut out = ParticleEnsemble::new_1d(states);
    out.lineage = Some((cfg.seed, cfg.stream_id));
    Ok(out)
}

/// Shared context of one coupled four-process run on the unit horizon with
/// η = 1/n_steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingContext {
    pub seed: u64,
    pub n_particles: usize,
    pub n_steps: usize,
    pub noise_refine: usize,
    /// Debug switch: the particle dynamics consumes an unrelated noise
    /// stream, breaking the synchronous coupling with the MKV run.
    pub decouple: bool,
    pub store_snapshots: bool,
    /// SGD passes over the data stream. The single-pass default is the
    /// regime all coupled comparisons run in; more passes extend the SGD
    /// run past the unit horizon and cannot be gap-decomposed against the
    /// other processes.
    pub sgd_epochs: usize,
}

impl CouplingContext {
    pub fn new(seed: u64, n_particles: usize, n_steps: usize) -> Self {
        Self {
            seed,
            n_particles,
            n_steps,
            noise_refine: 1,
            decouple: false,
            store_snapshots: true,
            sgd_epochs: 1,
        }
    }

    pub fn eta(&self) -> f64 {
        1.0 / self.n_steps as f64
    }
}

/// Per-step record of one process: risks always, states when requested.
#[derive(Debug, Clone)]
pub struct SimResult {
    /// R_N at t = k·η for k = 0..=n_steps.
    pub risks: Vec<f64>,
    /// States per step when snapshots are stored (k = 0..=n_steps).
    pub snapshots: Vec<Vec<f64>>,
    pub terminal: ParticleEnsemble,
    pub max_drift: f64,
}

struct StepLogger<'a> {
    prob: &'a ProblemInstance,
    store: bool,
    risks: Vec<f64>,
    snapshots: Vec<Vec<f64>>,
}

impl<'a> StepLogger<'a> {
    fn new(prob: &'a ProblemInstance, ctx: &CouplingContext) -> Self {
        Self {
            prob,
            store: ctx.store_snapshots,
            risks: Vec::with_capacity(ctx.n_steps + 1),
            snapshots: Vec::new(),
        }
    }

    fn record(&mut self, states: &[f64]) {
        let e = ParticleEnsemble::new_1d(states.to_vec());
        self.risks.push(self.prob.risk_of_ensemble(&e).expect("finite states"));
        if self.store {
            self.snapshots.push(states.to_vec());
        }
    }
}

/// Optimal McKean–Vlasov dynamics: Euler–Maruyama on the Föllmer drift
/// from `W₀ = 0` with diffusion √τ.
pub fn simulate_mkv(
    ctx: &CouplingContext,
    prob: &ProblemInstance,
    params: RegularizationParams,
    drift: &DriftField,
) -> Result<SimResult> {
    let mut logger = StepLogger::new(prob, ctx);
    let mut max_drift = 0.0f64;
    let eta = ctx.eta();
    let cfg = PathConfig {
        n_particles: ctx.n_particles,
        n_steps: ctx.n_steps,
        horizon: 1.0,
        diffusion: params.tau.sqrt(),
        init: InitLaw::Zeros,
        seed: ctx.seed,
        noise_refine: ctx.noise_refine,
        stream_id: stream::BROWNIAN,
    };
    let mut scratch = vec![0.0f64; ctx.n_particles];
    let terminal = integrate_paths(drift, &cfg, |k, t, states| {
        logger.record(states);
        if k < ctx.n_steps {
            drift.eval_many(states, t, &mut scratch);
            for &u in scratch.iter() {
                max_drift = max_drift.max(u.abs());
            }
        }
    })?;
    let _ = eta;
    Ok(SimResult { risks: logger.risks, snapshots: logger.snapshots, terminal, max_drift })
}

/// Interacting particle dynamics: drift `−β∇Ψ(·; μ̂⁽ᴺ⁾)` against the
/// running empirical measure, same Brownian increments as the MKV run
/// (unless `decouple` is set).
pub fn simulate_particle(
    ctx: &CouplingContext,
    prob: &ProblemInstance,
    params: RegularizationParams,
) -> Result<SimResult> {
    let n = ctx.n_particles;
    let eta = ctx.eta();
    let beta = params.beta;
    let sqrt_tau = params.tau.sqrt();
    let stream_id = if ctx.decouple { stream::BROWNIAN_ALT } else { stream::BROWNIAN };
    let base = RngStream::new(ctx.seed, stream_id);
    let streams: Vec<RngStream> = (0..n as u64).map(|i| base.substream(i)).collect();
    let mut states = vec![0.0f64; n];
    let mut logger = StepLogger::new(prob, ctx);
    let mut max_drift = 0.0f64;
    let (xs, _) = prob.data_nodes();
    let mut f_hat = vec![0.0f64; xs.len()];
    let mut sigma = vec![0.0f64; n];
    for k in 0..ctx.n_steps {
        logger.record(&states);
        // Jacobi-style: the interaction term is a read-only snapshot of the
        // ensemble, computed once per step
        for (j, &x) in xs.iter().enumerate() {
            for (s, &w) in sigma.iter_mut().zip(states.iter()) {
                *s = prob.activation().eval(x, w);
            }
            f_hat[j] = pairwise_sum(&sigma) / n as f64;
        }
        for (i, w) in states.iter_mut().enumerate() {
            let u = -beta * prob.grad_psi_plain(*w, &f_hat);
            if !u.is_finite() || u.abs() > DRIFT_BLOWUP {
                return Err(Error::Numerical {
                    context: alloc::format!("particle drift blow-up at step {k}, particle {i}: {u:e}"),
                });
            }
            max_drift = max_drift.max(u.abs());
            *w += eta * u + sqrt_tau * brownian_increment(&streams[i], eta, ctx.noise_refine, k);
        }
    }
    logger.record(&states);
    let mut terminal = ParticleEnsemble::new_1d(states);
    terminal.lineage = Some((ctx.seed, stream_id));
    Ok(SimResult { risks: logger.risks, snapshots: logger.snapshots, terminal, max_drift })
}

/// Gradient descent on the empirical risk surface: noise-free Euler steps
/// of `−β∇Ψ(·; μ̃⁽ᴺ⁾)` from the shared Gaussian initialization.
pub fn simulate_gd(
    ctx: &CouplingContext,
    prob: &ProblemInstance,
    params: RegularizationParams,
) -> Result<SimResult> {
    let n = ctx.n_particles;
    let eta = ctx.eta();
    let beta = params.beta;
    let mut states = initial_states(InitLaw::SharedGaussian { tau: params.tau }, n, ctx.seed);
    let mut logger = StepLogger::new(prob, ctx);
    let mut max_drift = 0.0f64;
    let (xs, _) = prob.data_nodes();
    let mut f_hat = vec![0.0f64; xs.len()];
    let mut sigma = vec![0.0f64; n];
    for k in 0..ctx.n_steps {
        logger.record(&states);
        for (j, &x) in xs.iter().enumerate() {
            for (s, &w) in sigma.iter_mut().zip(states.iter()) {
                *s = prob.activation().eval(x, w);
            }
            f_hat[j] = pairwise_sum(&sigma) / n as f64;
        }
        for (i, w) in states.iter_mut().enumerate() {
            let u = -beta * prob.grad_psi_plain(*w, &f_hat);
            if !u.is_finite() || u.abs() > DRIFT_BLOWUP {
                return Err(Error::Numerical {
                    context: alloc::format!("GD drift blow-up at step {k}, particle {i}: {u:e}"),
                });
            }
            max_drift = max_drift.max(u.abs());
            *w += eta * u;
        }
    }
    logger.record(&states);
    let mut terminal = ParticleEnsemble::new_1d(states);
    terminal.lineage = Some((ctx.seed, stream::INIT_GAUSS));
    Ok(SimResult { risks: logger.risks, snapshots: logger.snapshots, terminal, max_drift })
}

/// One-pass SGD: each step consumes one datum `(X, Y = f(X))` drawn from
/// the quadrature nodes proportionally to their weights; the update is
/// `Wⁱ += ηβ(Y − f̂_N(X; W))·∇σ(X; Wⁱ)`. Initialization is shared with GD.
pub fn simulate_sgd(
    ctx: &CouplingContext,
    prob: &ProblemInstance,
    params: RegularizationParams,
) -> Result<SimResult> {
    let n = ctx.n_particles;
    let eta = ctx.eta();
    let beta = params.beta;
    let mut states = initial_states(InitLaw::SharedGaussian { tau: params.tau }, n, ctx.seed);
    let mut logger = StepLogger::new(prob, ctx);
    let mut max_drift = 0.0f64;
    let data_stream = RngStream::new(ctx.seed, stream::DATA);
    let (xs, _) = prob.data_nodes();
    let mut sigma = vec![0.0f64; n];
    let total_steps = ctx.n_steps * ctx.sgd_epochs.max(1);
    for k in 0..total_steps {
        logger.record(&states);
        let j = prob.draw_data_node(data_stream.uniform_at(k as u64));
        let x = xs[j];
        let y = prob.f_at_node(j);
        for (s, &w) in sigma.iter_mut().zip(states.iter()) {
            *s = prob.activation().eval(x, w);
        }
        let f_hat_x = pairwise_sum(&sigma) / n as f64;
        let residual = y - f_hat_x;
        for (i, w) in states.iter_mut().enumerate() {
            let g = beta * residual * prob.activation().grad_w(x, *w);
            if !g.is_finite() {
                return Err(Error::Numerical {
                    context: alloc::format!("non-finite SGD update at step {k} (datum {j}), particle {i}"),
                });
            }
            max_drift = max_drift.max(g.abs());
            *w += eta * g;
        }
    }
    logger.record(&states);
    let mut terminal = ParticleEnsemble::new_1d(states);
    terminal.lineage = Some((ctx.seed, stream::DATA));
    Ok(SimResult { risks: logger.risks, snapshots: logger.snapshots, terminal, max_drift })
}

/// `R(μ*_t)` along the bridge marginal flow at `t = k·η`; `t = 0` is the
/// Dirac initial condition `R(δ₀) = R₀ + 2f̃(0) + K(0,0)`.
pub fn reference_risk_flow(
    vf: &ValueFunctionField,
    prob: &ProblemInstance,
    n_steps: usize,
) -> Result<Vec<f64>> {
    let (_, pw) = prob.data_nodes();
    let mut out = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let t = k as f64 / n_steps as f64;
        if k == 0 {
            out.push(prob.r0() + 2.0 * prob.f_tilde(0.0)? + prob.k_kernel(0.0, 0.0)?);
            continue;
        }
        let f_hat = vf.marginal_f_hat_nodes(t);
        let terms: Vec<f64> = pw
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let d = prob.f_at_node(j) - f_hat[j];
                p * d * d
            })
            .collect();
        out.push(pairwise_sum(&terms));
    }
    Ok(out)
}

/// One CSV row of the coupled-run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    pub t: f64,
    pub risk_mkv: f64,
    pub risk_particle: f64,
    pub risk_gd: f64,
    pub risk_sgd: f64,
    pub risk_ref: f64,
    /// |R(μ*_t) − R_N(W̄)|: sampling error along the optimal flow.
    pub gap_sampling: f64,
    /// |R_N(W̄) − R_N(Ŵ)|: MKV vs particle dynamics.
    pub gap_mkv_particle: f64,
    /// |R_N(Ŵ) − R_N(W̃)|: particle dynamics vs GD.
    pub gap_particle_gd: f64,
    /// |R_N(W̃) − R_N(W)|: GD vs SGD.
    pub gap_gd_sgd: f64,
    pub maxdist_mkv_particle: f64,
    pub maxdist_gd_sgd: f64,
}

/// The assembled four-process log with running maxima of the gap
/// decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
    /// Maxima over k of the four gaps, in decomposition order.
    pub max_gaps: [f64; 4],
    /// max_k |R_N(W_k) − R(μ*_{kη})| for the SGD iterates.
    pub max_total_gap: f64,
    /// The k = 0 entry of the total gap (initialization mismatch is
    /// reported separately, not folded into the decomposition).
    pub init_gap: f64,
    pub triangle_ok: bool,
}

/// Assemble the per-step gap decomposition from the four runs and the
/// reference flow. All inputs must share the step count; max-distance
/// columns need stored snapshots.
pub fn gap_decomposition(
    ref_flow: &[f64],
    mkv: &SimResult,
    particle: &SimResult,
    gd: &SimResult,
    sgd: &SimResult,
) -> Result<TrajectoryLog> {
    let n = ref_flow.len();
    for (name, sim) in
        [("mkv", mkv), ("particle", particle), ("gd", gd), ("sgd", sgd)]
    {
        if sim.risks.len() != n {
            let _ = name;
            return Err(Error::DimensionMismatch {
                context: "gap_decomposition log lengths",
                expected: n,
                got: sim.risks.len(),
            });
        }
    }
    let have_snapshots = mkv.snapshots.len() == n
        && particle.snapshots.len() == n
        && gd.snapshots.len() == n
        && sgd.snapshots.len() == n;
    if !have_snapshots {
        return Err(Error::InvalidArgument {
            context: "gap_decomposition needs stored snapshots for the distance columns",
        });
    }
    let steps = n - 1;
    let mut rows = Vec::with_capacity(n);
    let mut max_gaps = [0.0f64; 4];
    let mut max_total: f64 = 0.0;
    for k in 0..n {
        let maxdist = |a: &SimResult, b: &SimResult| {
            a.snapshots[k]
                .iter()
                .zip(&b.snapshots[k])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let row = TrajectoryRow {
            k,
            t: k as f64 / steps as f64,
            risk_mkv: mkv.risks[k],
            risk_particle: particle.risks[k],
            risk_gd: gd.risks[k],
            risk_sgd: sgd.risks[k],
            risk_ref: ref_flow[k],
            gap_sampling: (ref_flow[k] - mkv.risks[k]).abs(),
            gap_mkv_particle: (mkv.risks[k] - particle.risks[k]).abs(),
            gap_particle_gd: (particle.risks[k] - gd.risks[k]).abs(),
            gap_gd_sgd: (gd.risks[k] - sgd.risks[k]).abs(),
            maxdist_mkv_particle: maxdist(mkv, particle),
            maxdist_gd_sgd: maxdist(gd, sgd),
        };
        max_gaps[0] = max_gaps[0].max(row.gap_sampling);
        max_gaps[1] = max_gaps[1].max(row.gap_mkv_particle);
        max_gaps[2] = max_gaps[2].max(row.gap_particle_gd);
        max_gaps[3] = max_gaps[3].max(row.gap_gd_sgd);
        max_total = max_total.max((sgd.risks[k] - ref_flow[k]).abs());
        rows.push(row);
    }
    let init_gap = (sgd.risks[0] - ref_flow[0]).abs();
    let triangle_ok = max_gaps.iter().sum::<f64>() >= max_total - 1e-12;
    Ok(TrajectoryLog { rows, max_gaps, max_total_gap: max_total, init_gap, triangle_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{BridgeConfig, DriftField, ValueFunctionField};
    use crate::measures::wasserstein2_ensembles;
    use crate::preset;
    use alloc::sync::Arc;
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    fn default_vf() -> &'static Arc<ValueFunctionField> {
        static VF: OnceLock<Arc<ValueFunctionField>> = OnceLock::new();
        VF.get_or_init(|| {
            let p = preset::realizable(RegularizationParams::lazy(0.2, 1).unwrap());
            let sol = p.solve_default().unwrap();
            Arc::new(ValueFunctionField::new(&p.problem, &sol, BridgeConfig::default()).unwrap())
        })
    }

    #[test]
    fn zero_drift_terminal_variance_matches_tau() {
        let p = preset::sine(RegularizationParams::lazy(0.2, 1).unwrap());
        let ctx = CouplingContext::new(42, 20_000, 50);
        let sim = simulate_mkv(&ctx, &p.problem, p.params, &DriftField::zero()).unwrap();
        let var = sim.terminal.second_moment();
        let n = ctx.n_particles as f64;
        let se = (2.0 * p.params.tau * p.params.tau / n).sqrt();
        assert!(
            (var - p.params.tau).abs() <= 3.0 * se,
            "terminal variance {var} vs tau {} (3se {})",
            p.params.tau,
            3.0 * se
        );
    }

    #[test]
    fn beta_zero_pipeline_is_bitwise_zero_drift() {
        let params = RegularizationParams::new(0.0, 0.04).unwrap();
        let p = preset::sine(params);
        let sol = p.solve_default().unwrap();
        let vf =
            Arc::new(ValueFunctionField::new(&p.problem, &sol, BridgeConfig::default()).unwrap());
        let ctx = CouplingContext::new(7, 512, 32);
        let a = simulate_mkv(&ctx, &p.problem, params, &DriftField::follmer(vf)).unwrap();
        let b = simulate_mkv(&ctx, &p.problem, params, &DriftField::zero()).unwrap();
        assert_eq!(a.terminal.data(), b.terminal.data());
        for (x, y) in a.risks.iter().zip(&b.risks) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn mkv_terminal_law_approaches_mu_star() {
        let vf = default_vf();
        let ctx = CouplingContext::new(101, 20_000, 200);
        let drift = DriftField::follmer(vf.clone());
        let sim = simulate_mkv(&ctx, vf.problem(), vf.params(), &drift).unwrap();
        let ks = crate::oracle::ks_statistic(sim.terminal.data(), |x| vf.mu_star().cdf(x)).unwrap();
        assert!(ks <= 0.02, "terminal KS {ks}");
    }

    #[test]
    fn particle_beta_zero_is_bitwise_identical_to_mkv() {
        let params = RegularizationParams::new(0.0, 0.04).unwrap();
        let p = preset::sine(params);
        let ctx = CouplingContext::new(3, 256, 16);
        let mkv = simulate_mkv(&ctx, &p.problem, params, &DriftField::zero()).unwrap();
        let particle = simulate_particle(&ctx, &p.problem, params).unwrap();
        assert_eq!(mkv.terminal.data(), particle.terminal.data());
    }

    #[test]
    fn single_particle_matches_fine_step_oracle() {
        let p = preset::realizable(RegularizationParams::lazy(0.2, 1).unwrap());
        // coarse run on the refined noise lattice
        let ctx = CouplingContext {
            seed: 5,
            n_particles: 1,
            n_steps: 100,
            noise_refine: 10,
            decouple: false,
            store_snapshots: false,
            sgd_epochs: 1,
        };
        let coarse = simulate_particle(&ctx, &p.problem, p.params).unwrap();
        // oracle: same dynamics at 10× finer steps, same underlying noise
        let fine_ctx = CouplingContext {
            seed: 5,
            n_particles: 1,
            n_steps: 1000,
            noise_refine: 1,
            decouple: false,
            store_snapshots: false,
            sgd_epochs: 1,
        };
        let fine = simulate_particle(&fine_ctx, &p.problem, p.params).unwrap();
        let d = (coarse.terminal.scalar(0) - fine.terminal.scalar(0)).abs();
        assert!(d <= 1e-3, "coarse-vs-fine terminal gap {d:e}");
    }

    #[test]
    fn coupling_gap_grows_with_beta() {
        let mut gaps = Vec::new();
        for &beta in &[0.1, 0.4] {
            let params = RegularizationParams::new(beta, 0.04).unwrap();
            let p = preset::realizable(params);
            let sol = p.solve_default().unwrap();
            let vf = Arc::new(
                ValueFunctionField::new(&p.problem, &sol, BridgeConfig::default()).unwrap(),
            );
            let ctx = CouplingContext::new(11, 400, 50);
            let mkv = simulate_mkv(&ctx, &p.problem, params, &DriftField::follmer(vf)).unwrap();
            let particle = simulate_particle(&ctx, &p.problem, params).unwrap();
            let gap: f64 = mkv
                .snapshots
                .iter()
                .zip(&particle.snapshots)
                .map(|(a, b)| {
                    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            gaps.push(gap);
        }
        assert!(gaps[1] > gaps[0], "coupling gap did not grow with beta: {gaps:?}");
    }

    #[test]
    fn decouple_flag_strictly_increases_the_gap() {
        let vf = default_vf();
        let sup_gap = |decouple: bool| {
            let ctx = CouplingContext {
                seed: 2,
                n_particles: 400,
                n_steps: 50,
                noise_refine: 1,
                decouple,
                store_snapshots: true,
                sgd_epochs: 1,
            };
            let mkv =
                simulate_mkv(&ctx, vf.problem(), vf.params(), &DriftField::follmer(vf.clone()))
                    .unwrap();
            let particle = simulate_particle(&ctx, vf.problem(), vf.params()).unwrap();
            mkv.snapshots
                .iter()
                .zip(&particle.snapshots)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max)
        };
        let coupled = sup_gap(false);
        let decoupled = sup_gap(true);
        assert!(
            decoupled > coupled * 2.0,
            "decoupling did not widen the gap: {coupled} vs {decoupled}"
        );
    }

    #[test]
    fn gd_beta_zero_is_frozen() {
        let params = RegularizationParams::new(0.0, 0.04).unwrap();
        let p = preset::sine(params);
        let ctx = CouplingContext::new(9, 64, 16);
        let sim = simulate_gd(&ctx, &p.problem, params).unwrap();
        assert_eq!(sim.snapshots[0], sim.snapshots[ctx.n_steps]);
        assert_eq!(sim.risks[0].to_bits(), sim.risks[ctx.n_steps].to_bits());
    }

    #[test]
    fn gd_single_step_matches_hand_unroll() {
        let p = preset::sine(RegularizationParams::lazy(0.2, 1).unwrap());
        let prob = &p.problem;
        let params = p.params;
        let ctx = CouplingContext { seed: 13, n_particles: 2, n_steps: 4, noise_refine: 1, decouple: false, store_snapshots: true, sgd_epochs: 1 };
        let sim = simulate_gd(&ctx, prob, params).unwrap();
        let w = &sim.snapshots[0];
        let eta = ctx.eta();
        let (xs, pw) = prob.data_nodes();
        // hand-unrolled step with the same term order as the simulator
        let mut expect = [0.0f64; 2];
        for i in 0..2 {
            let mut acc = 0.0;
            for (j, &x) in xs.iter().enumerate() {
                let f_hat = (prob.activation().eval(x, w[0]) + prob.activation().eval(x, w[1])) / 2.0;
                acc += pw[j] * prob.activation().grad_w(x, w[i]) * (f_hat - prob.f_at_node(j));
            }
            expect[i] = w[i] + eta * (-params.beta * acc);
        }
        assert_eq!(sim.snapshots[1][0].to_bits(), expect[0].to_bits());
        assert_eq!(sim.snapshots[1][1].to_bits(), expect[1].to_bits());
    }

    #[test]
    fn gd_step_halving_extrapolates_at_first_order() {
        let p = preset::realizable(RegularizationParams::new(0.4, 0.04).unwrap());
        let run = |n_steps: usize| {
            let ctx = CouplingContext {
                seed: 19,
                n_particles: 128,
                n_steps,
                noise_refine: 1,
                decouple: false,
                store_snapshots: false,
                sgd_epochs: 1,
            };
            simulate_gd(&ctx, &p.problem, p.params).unwrap().terminal
        };
        let a = run(25);
        let b = run(50);
        let c = run(100);
        let d1 = wasserstein2_ensembles(&a, &b).unwrap();
        let d2 = wasserstein2_ensembles(&b, &c).unwrap();
        let order = (d1 / d2).log2();
        assert!((0.8..=1.2).contains(&order), "GD Euler order {order} (d1={d1:e}, d2={d2:e})");
    }

    #[test]
    fn sgd_beta_zero_is_frozen() {
        let params = RegularizationParams::new(0.0, 0.04).unwrap();
        let p = preset::sine(params);
        let ctx = CouplingContext::new(9, 64, 16);
        let sim = simulate_sgd(&ctx, &p.problem, params).unwrap();
        assert_eq!(sim.snapshots[0], sim.snapshots[ctx.n_steps]);
    }

    #[test]
    fn sgd_single_datum_step_matches_hand_unroll() {
        let p = preset::sine(RegularizationParams::lazy(0.2, 1).unwrap());
        let prob = &p.problem;
        let ctx = CouplingContext { seed: 21, n_particles: 1, n_steps: 2, noise_refine: 1, decouple: false, store_snapshots: true, sgd_epochs: 1 };
        let sim = simulate_sgd(&ctx, prob, p.params).unwrap();
        let w0 = sim.snapshots[0][0];
        let data_stream = RngStream::new(ctx.seed, stream::DATA);
        let j = prob.draw_data_node(data_stream.uniform_at(0));
        let (xs, _) = prob.data_nodes();
        let x = xs[j];
        let y = prob.f_at_node(j);
        let f_hat = prob.activation().eval(x, w0);
        let expect = w0 + ctx.eta() * (p.params.beta * (y - f_hat) * prob.activation().grad_w(x, w0));
        assert_eq!(sim.snapshots[1][0].to_bits(), expect.to_bits());
    }

    #[test]
    fn sgd_multi_epoch_extends_the_stream() {
        let p = preset::realizable(RegularizationParams::lazy(0.2, 1).unwrap());
        let one = CouplingContext::new(5, 32, 20);
        let two = CouplingContext { sgd_epochs: 2, ..one };
        let a = simulate_sgd(&one, &p.problem, p.params).unwrap();
        let b = simulate_sgd(&two, &p.problem, p.params).unwrap();
        assert_eq!(b.risks.len(), 2 * one.n_steps + 1);
        // the first pass is identical; the second keeps consuming data
        assert_eq!(a.risks[..], b.risks[..=one.n_steps]);
        assert_ne!(a.terminal.data(), b.terminal.data());
    }

    #[test]
    fn sgd_conditional_mean_is_the_gd_drift() {
        let p = preset::realizable(RegularizationParams::lazy(0.2, 1).unwrap());
        let prob = &p.problem;
        let (xs, pw) = prob.data_nodes();
        // a generic ensemble mid-flight
        let ws = [0.3, -0.8, 1.1, 0.05];
        let mut f_hat = alloc::vec![0.0; xs.len()];
        for (j, &x) in xs.iter().enumerate() {
            f_hat[j] = ws.iter().map(|&w| prob.activation().eval(x, w)).sum::<f64>() / ws.len() as f64;
        }
        for &w in &ws {
            // E[update | ensemble] over the finite data nodes
            let mut expectation = 0.0;
            for (j, &x) in xs.iter().enumerate() {
                expectation += pw[j]
                    * p.params.beta
                    * (prob.f_at_node(j) - f_hat[j])
                    * prob.activation().grad_w(x, w);
            }
            let gd_drift = -p.params.beta * prob.grad_psi_plain(w, &f_hat);
            assert_abs_diff_eq!(expectation, gd_drift, epsilon = 1e-10);
        }
    }

    #[test]
    fn drift_blowup_aborts_with_step_context() {
        // a fabricated solution with an absurd inverse temperature pushes
        // the greedy drift past the abort threshold
        let params = RegularizationParams::new(1e9, 0.04).unwrap();
        let p = preset::sine(params);
        let prior_grid = params.prior(1).discretize(p.grid);
        let fake = crate::free_energy::FixedPointSolution {
            mu_star: prior_grid,
            log_z: 0.0,
            residual: 0.0,
            iterations: 0,
            trace: alloc::vec![],
            params,
        };
        let vf = Arc::new(
            ValueFunctionField::new(&p.problem, &fake, BridgeConfig::default()).unwrap(),
        );
        let drift = DriftField::greedy(vf);
        let cfg = PathConfig {
            n_particles: 4,
            n_steps: 8,
            horizon: 1.0,
            diffusion: params.tau.sqrt(),
            init: InitLaw::Zeros,
            seed: 1,
            noise_refine: 1,
            stream_id: stream::BROWNIAN,
        };
        let err = integrate_paths(&drift, &cfg, |_, _, _| {}).unwrap_err();
        match err {
            Error::Numerical { context } => {
                assert!(context.contains("blow-up") && context.contains("step"), "{context}");
            }
            other => panic!("expected a blow-up abort, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let vf = default_vf();
        let ctx = CouplingContext::new(31, 128, 25);
        let drift = DriftField::follmer(vf.clone());
        let a = simulate_mkv(&ctx, vf.problem(), vf.params(), &drift).unwrap();
        let b = simulate_mkv(&ctx, vf.problem(), vf.params(), &drift).unwrap();
        assert_eq!(a.terminal.data(), b.terminal.data());
        assert_eq!(a.risks, b.risks);
        let s1 = simulate_sgd(&ctx, vf.problem(), vf.params()).unwrap();
        let s2 = simulate_sgd(&ctx, vf.problem(), vf.params()).unwrap();
        assert_eq!(s1.terminal.data(), s2.terminal.data());
    }

    #[test]
    fn euler_bias_decays_at_first_order_under_matched_noise() {
        let vf = default_vf();
        let drift = DriftField::follmer(vf.clone());
        let run = |n_steps: usize, refine: usize| {
            let ctx = CouplingContext {
                seed: 8,
                n_particles: 2_000,
                n_steps,
                noise_refine: refine,
                decouple: false,
                store_snapshots: false,
                sgd_epochs: 1,
            };
            simulate_mkv(&ctx, vf.problem(), vf.params(), &drift).unwrap().terminal
        };
        let reference = run(200, 1);
        let d50 = wasserstein2_ensembles(&run(50, 4), &reference).unwrap();
        let d100 = wasserstein2_ensembles(&run(100, 2), &reference).unwrap();
        let order = (d50 / d100).log2();
        assert!(order >= 0.8, "Euler bias order {order} (d50={d50:e}, d100={d100:e})");
    }

    #[test]
    fn reference_flow_endpoints() {
        let vf = default_vf();
        let prob = vf.problem();
        let flow = reference_risk_flow(vf, prob, 10).unwrap();
        // t = 0: the Dirac mass at zero
        let delta_risk = prob.r0() + 2.0 * prob.f_tilde(0.0).unwrap() + prob.k_kernel(0.0, 0.0).unwrap();
        assert_abs_diff_eq!(flow[0], delta_risk, epsilon = 1e-12);
        // t = 1: the fixed point
        let r_star = prob.risk_of_measure(vf.mu_star()).unwrap();
        assert_abs_diff_eq!(flow[10], r_star, epsilon = 1e-6);
    }

    #[test]
    fn reference_flow_beta_zero_matches_direct_quadrature() {
        let params = RegularizationParams::new(1e-12, 0.04).unwrap();
        let p = preset::sine(params);
        let sol = p.solve_default().unwrap();
        let vf = ValueFunctionField::new(&p.problem, &sol, BridgeConfig::default()).unwrap();
        let flow = reference_risk_flow(&vf, &p.problem, 4).unwrap();
        for (k, &r) in flow.iter().enumerate().skip(1) {
            let t = k as f64 / 4.0;
            let gauss = crate::measures::GridMeasure::gaussian_1d(p.grid, 0.0, params.tau * t);
            let direct = p.problem.risk_of_measure(&gauss).unwrap();
            assert_abs_diff_eq!(r, direct, epsilon = 1e-8);
        }
    }

    #[test]
    fn gap_decomposition_assembles_and_triangle_holds() {
        let vf = default_vf();
        let prob = vf.problem();
        let params = vf.params();
        let ctx = CouplingContext::new(51, 256, 40);
        let drift = DriftField::follmer(vf.clone());
        let mkv = simulate_mkv(&ctx, prob, params, &drift).unwrap();
        let particle = simulate_particle(&ctx, prob, params).unwrap();
        let gd = simulate_gd(&ctx, prob, params).unwrap();
        let sgd = simulate_sgd(&ctx, prob, params).unwrap();
        let flow = reference_risk_flow(vf, prob, ctx.n_steps).unwrap();
        let log = gap_decomposition(&flow, &mkv, &particle, &gd, &sgd).unwrap();
        assert_eq!(log.rows.len(), ctx.n_steps + 1);
        assert!(log.triangle_ok, "triangle inequality sanity failed");
        assert!(log.rows.iter().all(|r| r.risk_mkv >= 0.0 && r.risk_sgd >= 0.0));
    }

    #[test]
    fn gap_decomposition_beta_zero_gaps_vanish() {
        let params = RegularizationParams::new(0.0, 0.04).unwrap();
        let p = preset::sine(params);
        let sol = p.solve_default().unwrap();
        let vf = ValueFunctionField::new(&p.problem, &sol, BridgeConfig::default()).unwrap();
        let ctx = CouplingContext::new(3, 128, 16);
        let drift = DriftField::zero();
        let mkv = simulate_mkv(&ctx, &p.problem, params, &drift).unwrap();
        let particle = simulate_particle(&ctx, &p.problem, params).unwrap();
        let gd = simulate_gd(&ctx, &p.problem, params).unwrap();
        let sgd = simulate_sgd(&ctx, &p.problem, params).unwrap();
        let flow = reference_risk_flow(&vf, &p.problem, ctx.n_steps).unwrap();
        let log = gap_decomposition(&flow, &mkv, &particle, &gd, &sgd).unwrap();
        // MKV vs particle: identical noise, identically-zero drift
        assert_eq!(log.max_gaps[1], 0.0);
        // GD vs SGD: both frozen at the shared initialization
        assert_eq!(log.max_gaps[3], 0.0);
        // particle vs GD reflects the initialization mismatch only
        assert!(log.max_gaps[2] > 0.0);
    }

    #[test]
    fn greedy_drift_lipschitz_constant_scales_linearly_in_beta() {
        // G(w, μ) = −β∇Ψ(w; μ): the empirical Lipschitz ratio
        // ‖G(w,μ) − G(w',μ')‖ / (‖w−w'‖ + W₂(μ,μ')) stays below a fitted
        // κβ, and the fitted constant is linear in β.
        use crate::measures::{wasserstein2_grid, GridMeasure};
        use crate::problem::MeasureRef;
        let betas = [0.05, 0.1, 0.2, 0.4];
        let p = preset::realizable(RegularizationParams::new(0.2, 0.04).unwrap());
        let spec = p.grid;
        let s = RngStream::new(71, stream::PROBE);
        // pre-draw probe pairs once; only β rescales the drift
        let mut fitted = Vec::new();
        for &beta in &betas {
            let params = RegularizationParams::new(beta, 0.04).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..1000u64 {
                let w = 3.0 * s.uniform_at(6 * k) - 1.5;
                let w2 = 3.0 * s.uniform_at(6 * k + 1) - 1.5;
                let m1 = 0.6 * s.uniform_at(6 * k + 2) - 0.3;
                let m2 = 0.6 * s.uniform_at(6 * k + 3) - 0.3;
                let v1 = 0.02 + 0.06 * s.uniform_at(6 * k + 4);
                let v2 = 0.02 + 0.06 * s.uniform_at(6 * k + 5);
                let mu1 = GridMeasure::gaussian_1d(spec, m1, v1);
                let mu2 = GridMeasure::gaussian_1d(spec, m2, v2);
                let g1 = -params.beta * p.problem.grad_psi(w, MeasureRef::Grid(&mu1)).unwrap();
                let g2 = -params.beta * p.problem.grad_psi(w2, MeasureRef::Grid(&mu2)).unwrap();
                let dist = (w - w2).abs() + wasserstein2_grid(&mu1, &mu2).unwrap();
                if dist > 1e-6 {
                    worst = worst.max((g1 - g2).abs() / dist);
                }
            }
            fitted.push(worst);
        }
        let fit = crate::numeric::log_log_fit(betas.as_ref(), &fitted);
        assert!(
            (0.8..=1.2).contains(&fit.slope),
            "fitted Lipschitz constant slope {} (constants {fitted:?})",
            fit.slope
        );
    }

    #[test]
    fn gap_decomposition_rejects_mismatched_lengths() {
        let vf = default_vf();
        let prob = vf.problem();
        let params = vf.params();
        let ctx = CouplingContext::new(51, 64, 10);
        let drift = DriftField::follmer(vf.clone());
        let mkv = simulate_mkv(&ctx, prob, params, &drift).unwrap();
        let particle = simulate_particle(&ctx, prob, params).unwrap();
        let gd = simulate_gd(&ctx, prob, params).unwrap();
        let sgd = simulate_sgd(&ctx, prob, params).unwrap();
        let flow = reference_risk_flow(vf, prob, 5).unwrap();
        assert!(gap_decomposition(&flow, &mkv, &particle, &gd, &sgd).is_err());
    }
}
