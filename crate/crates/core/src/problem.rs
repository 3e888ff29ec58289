//! The approximation problem `(f, σ, π)` and its risk kernels.
//!
//! The data measure π is a fixed quadrature rule (Gauss–Legendre nodes by
//! default), so `f̃`, `K`, and the risks are deterministic functions; SGD
//! draws data by sampling node indices proportionally to the weights.
//!
//! Everything reduces to the per-node evaluations
//!   `f̃(w) = −Σⱼ πⱼ f(xⱼ) σ(xⱼ; w)` and
//!   `K(w, w') = Σⱼ πⱼ σ(xⱼ; w) σ(xⱼ; w')`,
//! and the potential `Ψ(w; μ) = Σⱼ πⱼ σ(xⱼ; w)·(f̂(xⱼ; μ) − f(xⱼ))`,
//! which makes Ψ and ∇Ψ exactly evaluable at any `w` in O(#nodes) once the
//! per-node means `f̂(xⱼ; μ)` are known.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::measures::{GridMeasure, ParticleEnsemble};
use crate::numeric::{gauss_legendre, pairwise_sum, pairwise_sum_sorted};
use crate::rng::RngStream;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Bounded activations satisfying the sup-norm and Lipschitz assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// σ(x; w) = tanh(w·x)
    Tanh,
    /// σ(x; w) = exp(−(x−w)²)
    GaussBump,
}

impl Activation {
    #[inline]
    pub fn eval(&self, x: f64, w: f64) -> f64 {
        match self {
            Activation::Tanh => (w * x).tanh(),
            Activation::GaussBump => (-(x - w) * (x - w)).exp(),
        }
    }

    /// ∂σ/∂w.
    #[inline]
    pub fn grad_w(&self, x: f64, w: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = (w * x).tanh();
                x * (1.0 - t * t)
            }
            Activation::GaussBump => 2.0 * (x - w) * (-(x - w) * (x - w)).exp(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::GaussBump => "gauss-bump",
        }
    }
}

/// Target function f.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Zero,
    /// f(x) = sin(frequency·π·x)
    Sine { frequency: f64 },
    /// Realizable: f(x) = ∫ σ(x; w) μ°(dw) over the stored grid measure.
    Realizable { mu0: GridMeasure, activation: Activation },
}

impl Target {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Target::Zero => 0.0,
            Target::Sine { frequency } => (frequency * core::f64::consts::PI * x).sin(),
            Target::Realizable { mu0, activation } => {
                mu0.integrate_1d(|w| activation.eval(x, w))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Target::Zero => "zero",
            Target::Sine { .. } => "sine",
            Target::Realizable { .. } => "realizable",
        }
    }
}

/// A measure argument accepted by Ψ and the risks.
#[derive(Debug, Clone, Copy)]
pub enum MeasureRef<'a> {
    Grid(&'a GridMeasure),
    Ensemble(&'a ParticleEnsemble),
}

/// The approximation problem: target, activation, data quadrature, and the
/// declared regularity constants κ₁ (sup-norm) and κ₂ (Lipschitz).
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    input_dim: usize,
    weight_dim: usize,
    data_x: Vec<f64>,
    data_w: Vec<f64>,
    data_box: (f64, f64),
    target: Target,
    activation: Activation,
    bound_kappa1: f64,
    lip_kappa2: f64,
    zero_interaction: bool,
    f_nodes: Vec<f64>,
    r0: f64,
}

impl ProblemInstance {
    /// Build a problem on Gauss–Legendre data nodes over `data_box`,
    /// with weights normalized to Σπⱼ = 1 (i.e. π uniform on the box).
    pub fn new(
        activation: Activation,
        target: Target,
        quadrature_order: usize,
        data_box: (f64, f64),
        bound_kappa1: f64,
        lip_kappa2: f64,
    ) -> Result<Self> {
        if data_box.1 <= data_box.0 {
            return Err(Error::InvalidArgument { context: "data box must be nonempty" });
        }
        if bound_kappa1 <= 0.0 || lip_kappa2 <= 0.0 {
            return Err(Error::InvalidArgument { context: "kappa bounds must be positive" });
        }
        let (nodes, weights) = gauss_legendre(quadrature_order);
        let (a, b) = data_box;
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let data_x: Vec<f64> = nodes.iter().map(|t| mid + half * t).collect();
        // GL weights sum to 2; normalizing by 2 represents the uniform law.
        let total: f64 = weights.iter().sum();
        let data_w: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let f_nodes: Vec<f64> = data_x.iter().map(|&x| target.eval(x)).collect();
        for (&x, &f) in data_x.iter().zip(&f_nodes) {
            if !f.is_finite() {
                return Err(Error::NonFinite { context: "target evaluation", node: x });
            }
        }
        let r0_terms: Vec<f64> = data_w.iter().zip(&f_nodes).map(|(w, f)| w * f * f).collect();
        let r0 = pairwise_sum(&r0_terms);
        Ok(Self {
            input_dim: 1,
            weight_dim: 1,
            data_x,
            data_w,
            data_box,
            target,
            activation,
            bound_kappa1,
            lip_kappa2,
            zero_interaction: false,
            f_nodes,
            r0,
        })
    }

    /// Diagnostic variant with the self-interaction kernel forced to zero
    /// (Ψ = f̃ only). Used to test that the Boltzmann map without
    /// interaction converges in a single step.
    pub fn with_zero_interaction(mut self) -> Self {
        self.zero_interaction = true;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn weight_dim(&self) -> usize {
        self.weight_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn data_box(&self) -> (f64, f64) {
        self.data_box
    }

    pub fn data_nodes(&self) -> (&[f64], &[f64]) {
        (&self.data_x, &self.data_w)
    }

    pub fn n_data(&self) -> usize {
        self.data_x.len()
    }

    pub fn kappa1(&self) -> f64 {
        self.bound_kappa1
    }

    pub fn kappa2(&self) -> f64 {
        self.lip_kappa2
    }

    pub fn zero_interaction(&self) -> bool {
        self.zero_interaction
    }

    /// Target value at data node `j` (cached).
    pub fn f_at_node(&self, j: usize) -> f64 {
        self.f_nodes[j]
    }

    /// `R₀ = E_π[f²]`.
    pub fn r0(&self) -> f64 {
        self.r0
    }

    fn check_finite(&self, value: f64, context: &'static str, node: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite { context, node })
        }
    }

    /// `f̃(w) = −E_π[f(X) σ(X; w)]`.
    pub fn f_tilde(&self, w: f64) -> Result<f64> {
        if !w.is_finite() {
            return Err(Error::NonFinite { context: "f_tilde weight", node: w });
        }
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            let s = self.activation.eval(self.data_x[j], w);
            self.check_finite(s, "activation in f_tilde", self.data_x[j])?;
            terms.push(-self.data_w[j] * self.f_nodes[j] * s);
        }
        Ok(pairwise_sum(&terms))
    }

    /// `K(w, w') = E_π[σ(X; w) σ(X; w')]`; symmetric by construction, and
    /// `K(w, w) = E_π[σ²] ≥ 0`.
    pub fn k_kernel(&self, w: f64, w2: f64) -> Result<f64> {
        if self.zero_interaction {
            return Ok(0.0);
        }
        if !w.is_finite() || !w2.is_finite() {
            return Err(Error::NonFinite { context: "k_kernel weight", node: if w.is_finite() { w2 } else { w } });
        }
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            let a = self.activation.eval(self.data_x[j], w);
            let b = self.activation.eval(self.data_x[j], w2);
            // multiply the activations first so the value is bit-symmetric
            let prod = a * b;
            self.check_finite(prod, "activation in k_kernel", self.data_x[j])?;
            terms.push(self.data_w[j] * prod);
        }
        Ok(pairwise_sum(&terms))
    }

    /// `∇f̃(w) = −E_π[f(X) ∇_w σ(X; w)]`.
    pub fn grad_f_tilde(&self, w: f64) -> Result<f64> {
        if !w.is_finite() {
            return Err(Error::NonFinite { context: "grad_f_tilde weight", node: w });
        }
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            let g = self.activation.grad_w(self.data_x[j], w);
            self.check_finite(g, "activation gradient", self.data_x[j])?;
            terms.push(-self.data_w[j] * self.f_nodes[j] * g);
        }
        Ok(pairwise_sum(&terms))
    }

    /// `∇₁K(w, w')`, gradient in the first argument.
    pub fn grad1_k(&self, w: f64, w2: f64) -> Result<f64> {
        if self.zero_interaction {
            return Ok(0.0);
        }
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            let g = self.activation.grad_w(self.data_x[j], w);
            let b = self.activation.eval(self.data_x[j], w2);
            self.check_finite(g * b, "activation in grad1_k", self.data_x[j])?;
            terms.push(self.data_w[j] * g * b);
        }
        Ok(pairwise_sum(&terms))
    }

    /// Per-node means `f̂(xⱼ; μ)` for a grid measure or an ensemble.
    pub fn f_hat_nodes(&self, mu: MeasureRef<'_>) -> Result<Vec<f64>> {
        match mu {
            MeasureRef::Grid(g) => {
                g.expect_normalized("f_hat_nodes")?;
                if g.dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        context: "f_hat_nodes",
                        expected: 1,
                        got: g.dim(),
                    });
                }
                Ok((0..self.n_data())
                    .map(|j| g.integrate_1d(|w| self.activation.eval(self.data_x[j], w)))
                    .collect())
            }
            MeasureRef::Ensemble(e) => {
                if e.is_empty() {
                    return Err(Error::EmptyEnsemble);
                }
                let n = e.len() as f64;
                let mut out = Vec::with_capacity(self.n_data());
                for j in 0..self.n_data() {
                    let terms: Vec<f64> = (0..e.len())
                        .map(|i| self.activation.eval(self.data_x[j], e.scalar(i)))
                        .collect();
                    out.push(pairwise_sum(&terms) / n);
                }
                Ok(out)
            }
        }
    }

    /// `Ψ(w; μ) = f̃(w) + ∫ K(w, ·) dμ`.
    pub fn psi(&self, w: f64, mu: MeasureRef<'_>) -> Result<f64> {
        let f_hat = self.f_hat_nodes(mu)?;
        self.psi_with_f_hat(w, &f_hat)
    }

    /// Ψ with the per-node means precomputed (hot path).
    pub fn psi_with_f_hat(&self, w: f64, f_hat: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            let s = self.activation.eval(self.data_x[j], w);
            self.check_finite(s, "activation in psi", self.data_x[j])?;
            let interaction = if self.zero_interaction { 0.0 } else { f_hat[j] };
            terms.push(self.data_w[j] * s * (interaction - self.f_nodes[j]));
        }
        Ok(pairwise_sum(&terms))
    }

    /// `∇Ψ(w; μ) = ∇f̃(w) + ∫ ∇₁K(w, ·) dμ`.
    pub fn grad_psi(&self, w: f64, mu: MeasureRef<'_>) -> Result<f64> {
        let f_hat = self.f_hat_nodes(mu)?;
        self.grad_psi_with_f_hat(w, &f_hat)
    }

    /// Plain left-to-right Ψ-gradient for simulation inner loops (no
    /// allocation; the SGD conditional-mean identity is bit-exact against
    /// the same term order).
    #[inline]
    pub fn grad_psi_plain(&self, w: f64, f_hat: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.n_data() {
            let g = self.activation.grad_w(self.data_x[j], w);
            let interaction = if self.zero_interaction { 0.0 } else { f_hat[j] };
            acc += self.data_w[j] * g * (interaction - self.f_nodes[j]);
        }
        acc
    }

    pub fn grad_psi_with_f_hat(&self, w: f64, f_hat: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            let g = self.activation.grad_w(self.data_x[j], w);
            self.check_finite(g, "activation gradient in grad_psi", self.data_x[j])?;
            let interaction = if self.zero_interaction { 0.0 } else { f_hat[j] };
            terms.push(self.data_w[j] * g * (interaction - self.f_nodes[j]));
        }
        Ok(pairwise_sum(&terms))
    }

    /// `R(μ) = R₀ + 2∫f̃ dμ + ∬K d(μ⊗μ)`, evaluated through the kernel
    /// route; values in [−1e-10, 0) are clamped to 0 (quadrature round-off).
    pub fn risk_of_measure(&self, mu: &GridMeasure) -> Result<f64> {
        mu.expect_normalized("risk_of_measure")?;
        let f_hat = self.f_hat_nodes(MeasureRef::Grid(mu))?;
        let lin = mu.integrate_1d(|w| {
            let mut terms = Vec::with_capacity(self.n_data());
            for j in 0..self.n_data() {
                terms.push(-self.data_w[j] * self.f_nodes[j] * self.activation.eval(self.data_x[j], w));
            }
            pairwise_sum(&terms)
        });
        let quad_terms: Vec<f64> = if self.zero_interaction {
            vec![0.0]
        } else {
            (0..self.n_data()).map(|j| self.data_w[j] * f_hat[j] * f_hat[j]).collect()
        };
        let r = self.r0 + 2.0 * lin + pairwise_sum(&quad_terms);
        if r < 0.0 {
            if r < -1e-10 {
                return Err(Error::Numerical {
                    context: alloc::format!("risk of measure is negative beyond slack: {r:e}"),
                });
            }
            log::debug!("risk_of_measure: clamped {r:e} to 0");
            return Ok(0.0);
        }
        Ok(r)
    }

    /// `R_N(w) = R(μ̂_w)`, evaluated pointwise over the data nodes with a
    /// permutation-invariant (sorted pairwise) reduction per node.
    pub fn risk_of_ensemble(&self, e: &ParticleEnsemble) -> Result<f64> {
        if e.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if self.zero_interaction {
            return self.risk_of_ensemble_zero_interaction(e);
        }
        let n = e.len() as f64;
        let mut sigma = vec![0.0; e.len()];
        let mut terms = Vec::with_capacity(self.n_data());
        for j in 0..self.n_data() {
            for i in 0..e.len() {
                sigma[i] = self.activation.eval(self.data_x[j], e.scalar(i));
            }
            let f_hat = pairwise_sum_sorted(&mut sigma) / n;
            let d = self.f_nodes[j] - f_hat;
            terms.push(self.data_w[j] * d * d);
        }
        Ok(pairwise_sum(&terms))
    }

    fn risk_of_ensemble_zero_interaction(&self, e: &ParticleEnsemble) -> Result<f64> {
        let n = e.len() as f64;
        let mut lin = Vec::with_capacity(e.len());
        for i in 0..e.len() {
            lin.push(self.f_tilde(e.scalar(i))?);
        }
        Ok(self.r0 + 2.0 * pairwise_sum_sorted(&mut lin) / n)
    }

    /// Index of a data node drawn proportionally to πⱼ.
    pub fn draw_data_node(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (j, &w) in self.data_w.iter().enumerate() {
            acc += w;
            if u <= acc {
                return j;
            }
        }
        self.n_data() - 1
    }

    /// Empirical regularity report over `n_probes` weights in `probe_box`.
    pub fn check_regularity(&self, probe_box: (f64, f64), n_probes: usize, stream: RngStream) -> RegularityReport {
        let (lo, hi) = probe_box;
        let draw = |k: u64| lo + (hi - lo) * stream.uniform_at(k);
        let mut sup_f: f64 = 0.0;
        for &f in &self.f_nodes {
            sup_f = sup_f.max(f.abs());
        }
        let mut sup_sigma: f64 = 0.0;
        let mut sup_f_tilde: f64 = 0.0;
        let mut sup_k: f64 = 0.0;
        let mut sup_grad_f_tilde: f64 = 0.0;
        let mut sup_grad1_k: f64 = 0.0;
        let mut lip_grad_f_tilde: f64 = 0.0;
        let mut lip_grad1_k: f64 = 0.0;
        let delta = 1e-4 * (hi - lo);
        let mut c = 0u64;
        let mut next = || {
            c += 1;
            draw(c)
        };
        for _ in 0..n_probes {
            let w = next();
            let w2 = next();
            for &x in &self.data_x {
                sup_sigma = sup_sigma.max(self.activation.eval(x, w).abs());
            }
            sup_f_tilde = sup_f_tilde.max(self.f_tilde(w).unwrap_or(f64::INFINITY).abs());
            sup_k = sup_k.max(self.k_kernel(w, w2).unwrap_or(f64::INFINITY).abs());
            let g = self.grad_f_tilde(w).unwrap_or(f64::INFINITY);
            sup_grad_f_tilde = sup_grad_f_tilde.max(g.abs());
            let gk = self.grad1_k(w, w2).unwrap_or(f64::INFINITY);
            sup_grad1_k = sup_grad1_k.max(gk.abs());
            // close-pair difference quotients approximate the local second derivative
            let g2 = self.grad_f_tilde(w + delta).unwrap_or(f64::INFINITY);
            lip_grad_f_tilde = lip_grad_f_tilde.max(((g2 - g) / delta).abs());
            let gk2 = self.grad1_k(w + delta, w2).unwrap_or(f64::INFINITY);
            let gk3 = self.grad1_k(w, w2 + delta).unwrap_or(f64::INFINITY);
            // directional quotients along each argument
            lip_grad1_k = lip_grad1_k.max(((gk2 - gk) / delta).abs()).max(((gk3 - gk) / delta).abs());
        }
        let k1 = self.bound_kappa1;
        let k2 = self.lip_kappa2;
        let ratios = [
            sup_f / k1,
            sup_sigma / k1,
            sup_f_tilde / (k1 * k1),
            sup_k / (k1 * k1),
            sup_grad_f_tilde / k2,
            sup_grad1_k / k2,
            lip_grad_f_tilde / k2,
            lip_grad1_k / k2,
        ];
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        RegularityReport {
            sup_f,
            sup_sigma,
            sup_f_tilde,
            sup_k,
            sup_grad_f_tilde,
            sup_grad1_k,
            lip_grad_f_tilde,
            lip_grad1_k,
            worst_ratio: worst,
            pass: worst <= 1.01,
        }
    }
}

/// Empirical sup-norms and Lipschitz ratios vs. the declared κ₁/κ₂.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    pub sup_f: f64,
    pub sup_sigma: f64,
    pub sup_f_tilde: f64,
    pub sup_k: f64,
    pub sup_grad_f_tilde: f64,
    pub sup_grad1_k: f64,
    pub lip_grad_f_tilde: f64,
    pub lip_grad1_k: f64,
    /// max over all checks of empirical/declared.
    pub worst_ratio: f64,
    /// true iff no empirical value exceeds its declared bound by more than 1%.
    pub pass: bool,
}

/// `f̃`, `K` and their gradients cached on the nodes of a grid.
#[derive(Debug, Clone)]
pub struct KernelCache {
    spec: crate::measures::GridSpec,
    pub f_tilde_values: Vec<f64>,
    pub grad_f_tilde_values: Vec<f64>,
    /// n×n row-major; symmetric.
    pub k_values: Vec<f64>,
    pub grad1_k_values: Vec<f64>,
}

impl KernelCache {
    pub fn build(prob: &ProblemInstance, spec: crate::measures::GridSpec) -> Result<Self> {
        let n = spec.n;
        let mut f_tilde_values = Vec::with_capacity(n);
        let mut grad_f_tilde_values = Vec::with_capacity(n);
        for i in 0..n {
            let w = spec.node(i);
            f_tilde_values.push(prob.f_tilde(w)?);
            grad_f_tilde_values.push(prob.grad_f_tilde(w)?);
        }
        let mut k_values = vec![0.0; n * n];
        let mut grad1_k_values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = prob.k_kernel(spec.node(i), spec.node(j))?;
                k_values[i * n + j] = v;
                k_values[j * n + i] = v;
            }
            for j in 0..n {
                grad1_k_values[i * n + j] = prob.grad1_k(spec.node(i), spec.node(j))?;
            }
        }
        Ok(Self { spec, f_tilde_values, grad_f_tilde_values, k_values, grad1_k_values })
    }

    pub fn spec(&self) -> crate::measures::GridSpec {
        self.spec
    }
}

/// Fit the ensemble-risk Lipschitz constant `C` in
/// `|R_N(w) − R_N(w̃)| ≤ C · maxᵢ‖wⁱ − w̃ⁱ‖` over random probes.
pub fn fit_risk_lipschitz(
    prob: &ProblemInstance,
    n_particles: usize,
    n_probes: usize,
    stream: RngStream,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut c = 0u64;
    let mut next = || {
        c += 1;
        stream.uniform_at(c)
    };
    for _ in 0..n_probes {
        let base: Vec<f64> = (0..n_particles).map(|_| 4.0 * next() - 2.0).collect();
        let scale = 1e-3 + 0.3 * next();
        let pert: Vec<f64> = base.iter().map(|w| w + scale * (2.0 * next() - 1.0)).collect();
        let a = ParticleEnsemble::new_1d(base.clone());
        let b = ParticleEnsemble::new_1d(pert.clone());
        let maxdist = base
            .iter()
            .zip(&pert)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if maxdist < 1e-12 {
            continue;
        }
        let dr = (prob.risk_of_ensemble(&a)? - prob.risk_of_ensemble(&b)?).abs();
        worst = worst.max(dr / maxdist);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{GridMeasure, GridSpec};
    use crate::oracle;
    use crate::rng::stream;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn sine_problem() -> ProblemInstance {
        ProblemInstance::new(
            Activation::Tanh,
            Target::Sine { frequency: 1.0 },
            32,
            (-1.0, 1.0),
            1.0,
            1.5,
        )
        .unwrap()
    }

    fn zero_problem() -> ProblemInstance {
        ProblemInstance::new(Activation::Tanh, Target::Zero, 32, (-1.0, 1.0), 1.0, 1.5).unwrap()
    }

    #[test]
    fn f_tilde_zero_target_vanishes() {
        let p = zero_problem();
        for &w in &[0.0, 0.7, -3.0, 11.0] {
            assert_eq!(p.f_tilde(w).unwrap(), 0.0);
        }
    }

    #[test]
    fn f_tilde_at_zero_weight_vanishes_for_tanh() {
        let p = sine_problem();
        assert_eq!(p.f_tilde(0.0).unwrap(), 0.0);
    }

    #[test]
    fn f_tilde_matches_dense_riemann_oracle() {
        // π = GL(20) on [−1,1] per the reference case; the oracle is a
        // 10⁶-point Riemann sum of −f(x)·tanh(x)/2.
        let p = ProblemInstance::new(
            Activation::Tanh,
            Target::Sine { frequency: 1.0 },
            20,
            (-1.0, 1.0),
            1.0,
            1.5,
        )
        .unwrap();
        let got = p.f_tilde(1.0).unwrap();
        let oracle_val = oracle::dense_riemann_f_tilde(&p, 1.0, 1_000_000);
        assert_abs_diff_eq!(got, oracle_val, epsilon = 1e-6);
        // frozen from a 30-digit quadrature of −∫ sin(πx) tanh(x) dx / 2
        assert_abs_diff_eq!(got, -0.283730768884106, epsilon = 1e-12);
    }

    #[test]
    fn k_kernel_zero_weights_vanish_for_tanh() {
        let p = sine_problem();
        assert_eq!(p.k_kernel(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn k_kernel_is_exactly_symmetric() {
        let p = sine_problem();
        let s = RngStream::new(2, stream::PROBE);
        for k in 0..100 {
            let w = 6.0 * s.uniform_at(2 * k) - 3.0;
            let w2 = 6.0 * s.uniform_at(2 * k + 1) - 3.0;
            assert_eq!(
                p.k_kernel(w, w2).unwrap().to_bits(),
                p.k_kernel(w2, w).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn k_kernel_matches_dense_riemann_oracle() {
        let p = sine_problem();
        let got = p.k_kernel(1.0, 2.0).unwrap();
        let oracle_val = oracle::dense_riemann_k(&p, 1.0, 2.0, 1_000_000);
        assert_abs_diff_eq!(got, oracle_val, epsilon = 1e-6);
        // frozen: ∫ tanh(x) tanh(2x) dx / 2 over [−1,1]
        assert_abs_diff_eq!(got, 0.349119831976992, epsilon = 1e-12);
    }

    #[test]
    fn k_diagonal_nonnegative() {
        let p = sine_problem();
        for &w in &[0.0, 0.3, -1.5, 4.0] {
            assert!(p.k_kernel(w, w).unwrap() >= 0.0);
        }
    }

    #[test]
    fn psi_of_point_mass_at_origin_is_f_tilde() {
        let p = sine_problem();
        let delta = ParticleEnsemble::new_1d(alloc::vec![0.0]);
        for &w in &[0.2, 1.0, -0.7] {
            // K(w, 0) = 0 for tanh, so Ψ(w; δ₀) = f̃(w)
            assert_relative_eq!(
                p.psi(w, MeasureRef::Ensemble(&delta)).unwrap(),
                p.f_tilde(w).unwrap(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn psi_grid_vs_resampled_ensemble() {
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.0, 0.01);
        let mu = GridMeasure::gaussian_1d(spec, 0.3, 0.05);
        let e = mu.sample(100_000, RngStream::new(4, stream::SAMPLER)).unwrap();
        let a = p.psi(0.8, MeasureRef::Grid(&mu)).unwrap();
        let b = p.psi(0.8, MeasureRef::Ensemble(&e)).unwrap();
        // 3 significant digits
        assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-3), "grid {a} vs ensemble {b}");
    }

    #[test]
    fn psi_against_nested_quadrature_oracle() {
        let p = sine_problem();
        let tau = 0.04;
        let prior = crate::measures::GaussianPrior::new(tau, 1);
        let spec = GridSpec::with_max_spacing(8.0 * tau.sqrt(), tau.sqrt() / 10.0);
        let mu = prior.discretize(spec);
        let got = p.psi(0.5, MeasureRef::Grid(&mu)).unwrap();
        let oracle_val = oracle::nested_quadrature_psi(&p, 0.5, tau, 20_000, 2_000);
        assert_abs_diff_eq!(got, oracle_val, epsilon = 1e-5);
        // frozen: equals f̃(0.5) because K(0.5, ·) integrates to zero
        // against any symmetric measure under tanh
        assert_abs_diff_eq!(got, -0.154211682808112, epsilon = 1e-9);
    }

    #[test]
    fn psi_rejects_unnormalized_measure() {
        let p = sine_problem();
        let spec = GridSpec::new(1.0, 65);
        let raw = GridMeasure::from_fn_1d(spec, |w| (1.0 - w * w).max(0.0));
        let err = p.psi(0.1, MeasureRef::Grid(&raw)).unwrap_err();
        assert!(matches!(err, Error::Unnormalized { .. }));
    }

    #[test]
    fn grad_psi_matches_finite_differences() {
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.0, 0.01);
        let s = RngStream::new(17, stream::PROBE);
        for k in 0..50u64 {
            let w = 4.0 * s.uniform_at(2 * k) - 2.0;
            let mean = 0.8 * s.uniform_at(2 * k + 1) - 0.4;
            let mu = GridMeasure::gaussian_1d(spec, mean, 0.05);
            let f_hat = p.f_hat_nodes(MeasureRef::Grid(&mu)).unwrap();
            let analytic = p.grad_psi_with_f_hat(w, &f_hat).unwrap();
            let fd = oracle::finite_difference_gradient(
                |x| p.psi_with_f_hat(x, &f_hat).unwrap(),
                w,
                1e-5,
            );
            assert_relative_eq!(analytic, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn grad_psi_zero_target_delta_origin() {
        let p = zero_problem();
        let delta = ParticleEnsemble::new_1d(alloc::vec![0.0]);
        assert_eq!(p.grad_psi(0.0, MeasureRef::Ensemble(&delta)).unwrap(), 0.0);
    }

    #[test]
    fn grad_psi_is_linear_in_the_measure() {
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.0, 0.01);
        let mu1 = GridMeasure::gaussian_1d(spec, -0.4, 0.04);
        let mu2 = GridMeasure::gaussian_1d(spec, 0.5, 0.06);
        let blended: alloc::vec::Vec<f64> = (0..mu1.len())
            .map(|i| 0.5 * mu1.density_at(i) + 0.5 * mu2.density_at(i))
            .collect();
        let mut mix = GridMeasure::from_values_1d(spec, blended);
        mix.normalize();
        let w = 0.9;
        let gf = p.grad_f_tilde(w).unwrap();
        let kpart = |m: &GridMeasure| p.grad_psi(w, MeasureRef::Grid(m)).unwrap() - gf;
        let lhs = kpart(&mix);
        let rhs = 0.5 * kpart(&mu1) + 0.5 * kpart(&mu2);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
    }

    #[test]
    fn risk_of_realizable_measure_is_zero() {
        let spec = GridSpec::with_max_spacing(2.8, 0.01);
        let mu0 = GridMeasure::mixture_1d(spec, &[(0.3, -1.0, 0.05), (0.7, 1.0, 0.05)]);
        let p = ProblemInstance::new(
            Activation::Tanh,
            Target::Realizable { mu0: mu0.clone(), activation: Activation::Tanh },
            32,
            (-1.0, 1.0),
            1.0,
            1.5,
        )
        .unwrap();
        let r = p.risk_of_measure(&mu0).unwrap();
        assert!(r <= 1e-8, "realizable risk {r}");
    }

    #[test]
    fn risk_of_delta_at_origin_is_r0() {
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.0, 0.005);
        let delta = GridMeasure::delta_like_1d(spec, 0.0);
        let r = p.risk_of_measure(&delta).unwrap();
        assert_relative_eq!(r, p.r0(), max_relative = 1e-12);
    }

    #[test]
    fn risk_matches_pointwise_definition() {
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.0, 0.01);
        let mu = GridMeasure::mixture_1d(spec, &[(0.6, -0.5, 0.03), (0.4, 0.8, 0.05)]);
        let kernel_route = p.risk_of_measure(&mu).unwrap();
        let pointwise = oracle::pointwise_risk(&p, &mu);
        assert_abs_diff_eq!(kernel_route, pointwise, epsilon = 1e-10);
    }

    #[test]
    fn ensemble_risk_single_particle_at_origin() {
        let p = sine_problem();
        let e = ParticleEnsemble::new_1d(alloc::vec![0.0]);
        assert_relative_eq!(p.risk_of_ensemble(&e).unwrap(), p.r0(), max_relative = 1e-14);
    }

    #[test]
    fn ensemble_risk_is_permutation_invariant_bitwise() {
        let p = sine_problem();
        let e1 = ParticleEnsemble::new_1d(alloc::vec![0.3, -1.2, 0.9, 2.4, -0.1]);
        let e2 = ParticleEnsemble::new_1d(alloc::vec![2.4, 0.9, -0.1, 0.3, -1.2]);
        assert_eq!(
            p.risk_of_ensemble(&e1).unwrap().to_bits(),
            p.risk_of_ensemble(&e2).unwrap().to_bits()
        );
    }

    #[test]
    fn ensemble_risk_matches_double_sum_oracle() {
        let p = sine_problem();
        let s = RngStream::new(5, stream::PROBE);
        for trial in 0..8u64 {
            let n = 8;
            let data: Vec<f64> = (0..n).map(|i| 3.0 * s.normal_at(trial * 64 + i)).collect();
            let e = ParticleEnsemble::new_1d(data);
            let fast = p.risk_of_ensemble(&e).unwrap();
            let slow = oracle::double_sum_risk(&p, &e).unwrap();
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
        }
        // and for larger ensembles, per the module invariant
        for &n in &[16u64, 64] {
            let data: Vec<f64> = (0..n).map(|i| 2.0 * s.normal_at(1000 + i)).collect();
            let e = ParticleEnsemble::new_1d(data);
            let fast = p.risk_of_ensemble(&e).unwrap();
            let slow = oracle::double_sum_risk(&p, &e).unwrap();
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
        }
    }

    #[test]
    fn regularity_tanh_within_declared_bounds() {
        let p = sine_problem();
        let rep = p.check_regularity((-5.0, 5.0), 400, RngStream::new(3, stream::PROBE));
        assert!(rep.pass, "worst ratio {}", rep.worst_ratio);
        assert!(rep.worst_ratio <= 1.0, "worst ratio {}", rep.worst_ratio);
    }

    #[test]
    fn regularity_zero_target_f_tilde_ratios_vanish() {
        let p = zero_problem();
        let rep = p.check_regularity((-5.0, 5.0), 100, RngStream::new(3, stream::PROBE));
        assert_eq!(rep.sup_f_tilde, 0.0);
        assert_eq!(rep.sup_grad_f_tilde, 0.0);
        assert_eq!(rep.lip_grad_f_tilde, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn empirical_grad_f_tilde_lipschitz_matches_hessian_oracle() {
        let p = sine_problem();
        // dense-grid maximum of |∇²f̃| by central differences of ∇f̃
        let n = 4001;
        let (lo, hi) = (-2.0, 2.0);
        let mut oracle_max: f64 = 0.0;
        for i in 0..n {
            let w = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let h2 = oracle::finite_difference_gradient(|x| p.grad_f_tilde(x).unwrap(), w, 1e-5);
            oracle_max = oracle_max.max(h2.abs());
        }
        // empirical close-pair ratio scan
        let s = RngStream::new(8, stream::PROBE);
        let mut emp: f64 = 0.0;
        for k in 0..4000u64 {
            let w = lo + (hi - lo) * s.uniform_at(k);
            let d = 1e-4;
            let r = ((p.grad_f_tilde(w + d).unwrap() - p.grad_f_tilde(w).unwrap()) / d).abs();
            emp = emp.max(r);
        }
        assert!(
            (emp - oracle_max).abs() <= 0.05 * oracle_max,
            "empirical {emp} vs oracle {oracle_max}"
        );
    }

    #[test]
    fn risk_lipschitz_fit_is_stable_across_probe_sets() {
        let p = sine_problem();
        let c1 = fit_risk_lipschitz(&p, 16, 300, RngStream::new(100, stream::PROBE)).unwrap();
        let c2 = fit_risk_lipschitz(&p, 16, 300, RngStream::new(200, stream::PROBE)).unwrap();
        let rel = (c1 - c2).abs() / c1.max(c2);
        assert!(rel <= 0.2, "fitted C unstable: {c1} vs {c2}");
    }

    #[test]
    fn kernel_cache_invariants() {
        let p = sine_problem();
        let spec = GridSpec::new(2.0, 33);
        let cache = KernelCache::build(&p, spec).unwrap();
        let n = spec.n;
        for i in 0..n {
            assert!(cache.k_values[i * n + i] >= 0.0);
            for j in 0..n {
                assert_eq!(
                    cache.k_values[i * n + j].to_bits(),
                    cache.k_values[j * n + i].to_bits()
                );
            }
        }
    }

    #[test]
    fn risk_nonnegative_across_measures() {
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.0, 0.01);
        for mu in [
            GridMeasure::gaussian_1d(spec, 0.0, 0.04),
            GridMeasure::gaussian_1d(spec, 1.2, 0.1),
            GridMeasure::uniform_1d(spec),
            GridMeasure::mixture_1d(spec, &[(0.2, -1.0, 0.02), (0.8, 0.6, 0.08)]),
        ] {
            assert!(p.risk_of_measure(&mu).unwrap() >= 0.0);
        }
    }

    #[test]
    fn risk_smoothing_is_linear_in_convolution_variance() {
        // |R(μ*γε) − R(μ)| ≤ C·ε with a clean linear fit over small ε
        let p = sine_problem();
        let spec = GridSpec::with_max_spacing(2.2, 0.008);
        let mu = GridMeasure::mixture_1d(spec, &[(0.35, -0.6, 0.02), (0.65, 0.7, 0.04)]);
        let r0 = p.risk_of_measure(&mu).unwrap();
        let eps: Vec<f64> = (1..=10).map(|k| 1e-3 * k as f64).collect();
        let gaps: Vec<f64> = eps
            .iter()
            .map(|&e| {
                let smoothed = crate::measures::convolve_gaussian(&mu, e);
                (p.risk_of_measure(&smoothed).unwrap() - r0).abs()
            })
            .collect();
        let fit = crate::numeric::linear_fit(&eps, &gaps);
        assert!(fit.r2 >= 0.99, "risk smoothing fit R2 = {}", fit.r2);
        assert!(fit.slope > 0.0 && fit.slope.is_finite());
    }

    #[test]
    fn gauss_bump_activation_regularity() {
        let p = ProblemInstance::new(
            Activation::GaussBump,
            Target::Sine { frequency: 1.0 },
            32,
            (-1.0, 1.0),
            1.0,
            2.0,
        )
        .unwrap();
        let rep = p.check_regularity((-4.0, 4.0), 300, RngStream::new(21, stream::PROBE));
        assert!(rep.pass, "worst ratio {}", rep.worst_ratio);
    }
}
