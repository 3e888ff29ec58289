//! Probability-measure representations and the divergences the theory is
//! stated in.
//!
//! Three representations:
//! * [`GridMeasure`]: a density on a uniform grid over `[−L, L]^d`,
//!   `d ∈ {1, 2}`, integrated by the trapezoid rule. For the smooth,
//!   rapidly decaying densities in this crate the trapezoid rule is
//!   spectrally accurate, which is what makes the 1e-9-level tolerances
//!   on KL and normalization attainable.
//! * [`GaussianPrior`]: the centered isotropic Gaussian `γτ`, kept in
//!   closed form.
//! * [`ParticleEnsemble`]: `N` weight vectors, the representation of
//!   finite nets and empirical measures.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numeric::{self, pairwise_sum};
use crate::rng::RngStream;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Number of quantile points for the 1D W₂ integral. Halving this may not
/// change results by more than 1e-5 (guarded by a test).
pub const W2_QUANTILE_POINTS: usize = 4096;

/// Tolerance on the trapezoid integral of a normalized density.
pub const NORMALIZATION_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// GaussianPrior
// ---------------------------------------------------------------------------

/// The centered Gaussian `γτ = N(0, τ I_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    tau: f64,
    dim: usize,
}

impl GaussianPrior {
    pub fn new(tau: f64, dim: usize) -> Self {
        assert!(tau > 0.0 && tau.is_finite(), "prior variance must be positive");
        assert!(dim == 1 || dim == 2, "only d in {{1,2}} is supported");
        Self { tau, dim }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Density at a point (length-`dim` slice).
    pub fn density(&self, w: &[f64]) -> f64 {
        self.log_density(w).exp()
    }

    pub fn log_density(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.dim);
        let sq: f64 = w.iter().map(|x| x * x).sum();
        -0.5 * sq / self.tau
            - 0.5 * self.dim as f64 * (2.0 * core::f64::consts::PI * self.tau).ln()
    }

    /// One-dimensional marginal CDF.
    pub fn cdf_1d(&self, w: f64) -> f64 {
        numeric::norm_cdf(w / self.tau.sqrt())
    }

    /// One-dimensional marginal quantile.
    pub fn quantile_1d(&self, u: f64) -> f64 {
        self.tau.sqrt() * numeric::norm_quantile(u)
    }

    /// Mass outside the box `[−l, l]^d`.
    pub fn mass_outside_box(&self, l: f64) -> f64 {
        let per_axis = 2.0 * numeric::norm_cdf(-l / self.tau.sqrt());
        match self.dim {
            1 => per_axis,
            _ => 1.0 - (1.0 - per_axis) * (1.0 - per_axis),
        }
    }

    /// Deterministic i.i.d. sample.
    pub fn sample(&self, n: usize, stream: RngStream) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::InvalidArgument { context: "sample size must be positive" });
        }
        let s = self.tau.sqrt();
        let mut data = Vec::with_capacity(n * self.dim);
        for k in 0..(n * self.dim) as u64 {
            data.push(s * stream.normal_at(k));
        }
        Ok(ParticleEnsemble::new(self.dim, data))
    }

    /// Discretize on a grid (normalized).
    pub fn discretize(&self, spec: GridSpec) -> GridMeasure {
        let mut m = match self.dim {
            1 => GridMeasure::from_fn_1d(spec, |w| self.density(&[w])),
            _ => GridMeasure::from_fn_2d(spec, |x, y| self.density(&[x, y])),
        };
        m.normalize();
        m
    }
}

// ---------------------------------------------------------------------------
// GridMeasure
// ---------------------------------------------------------------------------

/// Uniform grid geometry: `n` nodes per axis spanning `[−l, l]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub l: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(l: f64, n: usize) -> Self {
        assert!(l > 0.0 && n >= 4);
        Self { l, n }
    }

    /// Spec with an odd node count so the origin is a node, spacing ≤ `h_max`.
    pub fn with_max_spacing(l: f64, h_max: f64) -> Self {
        let mut n = ((2.0 * l / h_max).ceil() as usize) + 1;
        if n.is_multiple_of(2) {
            n += 1;
        }
        Self { l, n: n.max(5) }
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.l / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        -self.l + i as f64 * self.spacing()
    }
}

/// A (usually normalized) density on a uniform 1D or 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    dim: usize,
    spec: GridSpec,
    density: Vec<f64>, // len n (1D) or n² row-major (2D)
    normalized: bool,
}

impl GridMeasure {
    pub fn from_fn_1d(spec: GridSpec, mut f: impl FnMut(f64) -> f64) -> Self {
        let density = (0..spec.n).map(|i| f(spec.node(i)).max(0.0)).collect();
        Self { dim: 1, spec, density, normalized: false }
    }

    pub fn from_fn_2d(spec: GridSpec, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let n = spec.n;
        let mut density = Vec::with_capacity(n * n);
        for ix in 0..n {
            for iy in 0..n {
                density.push(f(spec.node(ix), spec.node(iy)).max(0.0));
            }
        }
        Self { dim: 2, spec, density, normalized: false }
    }

    pub fn from_values_1d(spec: GridSpec, density: Vec<f64>) -> Self {
        assert_eq!(density.len(), spec.n);
        assert!(density.iter().all(|&r| r >= 0.0 && r.is_finite()));
        Self { dim: 1, spec, density, normalized: false }
    }

    /// Normalized Gaussian `N(mean, var)` restricted to the grid box.
    pub fn gaussian_1d(spec: GridSpec, mean: f64, var: f64) -> Self {
        let mut m = Self::from_fn_1d(spec, |w| {
            (-(w - mean) * (w - mean) / (2.0 * var)).exp()
        });
        m.normalize();
        m
    }

    /// Normalized mixture Σ weightᵢ·N(meanᵢ, varᵢ) restricted to the box.
    pub fn mixture_1d(spec: GridSpec, components: &[(f64, f64, f64)]) -> Self {
        let mut m = Self::from_fn_1d(spec, |w| {
            components
                .iter()
                .map(|&(weight, mean, var)| {
                    weight * (-(w - mean) * (w - mean) / (2.0 * var)).exp()
                        / (2.0 * core::f64::consts::PI * var).sqrt()
                })
                .sum()
        });
        m.normalize();
        m
    }

    pub fn uniform_1d(spec: GridSpec) -> Self {
        let mut m = Self::from_fn_1d(spec, |_| 1.0);
        m.normalize();
        m
    }

    /// All mass at the grid node nearest to `w0`.
    pub fn delta_like_1d(spec: GridSpec, w0: f64) -> Self {
        let h = spec.spacing();
        let i = (((w0 + spec.l) / h).round() as usize).min(spec.n - 1);
        let mut density = vec![0.0; spec.n];
        // trapezoid weight at an interior node is h
        density[i] = if i == 0 || i == spec.n - 1 { 2.0 / h } else { 1.0 / h };
        let mut m = Self { dim: 1, spec, density, normalized: false };
        m.normalized = (m.integral() - 1.0).abs() <= NORMALIZATION_TOL;
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing()
    }

    pub fn node(&self, i: usize) -> f64 {
        self.spec.node(i)
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn density_values(&self) -> &[f64] {
        &self.density
    }

    pub fn density_at(&self, i: usize) -> f64 {
        self.density[i]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Trapezoid weight of flat index `i` (product form in 2D).
    pub fn trap_weight(&self, i: usize) -> f64 {
        let h = self.spec.spacing();
        let edge = |k: usize| if k == 0 || k == self.spec.n - 1 { 0.5 * h } else { h };
        match self.dim {
            1 => edge(i),
            _ => edge(i / self.spec.n) * edge(i % self.spec.n),
        }
    }

    pub fn integral(&self) -> f64 {
        let terms: Vec<f64> = (0..self.len()).map(|i| self.trap_weight(i) * self.density[i]).collect();
        pairwise_sum(&terms)
    }

    /// Trapezoid integral of `g(node) · ρ(node). 1D only.
    pub fn integrate_1d(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let terms: Vec<f64> = (0..self.len())
            .map(|i| self.trap_weight(i) * self.density[i] * g(self.node(i)))
            .collect();
        pairwise_sum(&terms)
    }

    pub fn normalize(&mut self) {
        let z = self.integral();
        assert!(z > 0.0 && z.is_finite(), "cannot normalize zero/non-finite mass");
        for r in &mut self.density {
            *r /= z;
        }
        self.normalized = true;
    }

    pub fn expect_normalized(&self, context: &'static str) -> Result<()> {
        let z = self.integral();
        if !self.normalized || (z - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Unnormalized { context, integral: z });
        }
        Ok(())
    }

    pub fn second_moment(&self) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .map(|i| {
                let sq = match self.dim {
                    1 => {
                        let w = self.node(i);
                        w * w
                    }
                    _ => {
                        let x = self.spec.node(i / self.spec.n);
                        let y = self.spec.node(i % self.spec.n);
                        x * x + y * y
                    }
                };
                self.trap_weight(i) * self.density[i] * sq
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// Differential entropy −∫ρ log ρ with 0·log 0 := 0.
    pub fn differential_entropy(&self) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .map(|i| {
                let r = self.density[i];
                if r > 0.0 {
                    -self.trap_weight(i) * r * r.ln()
                } else {
                    0.0
                }
            })
            .collect();
        pairwise_sum(&terms)
    }

    pub fn sup_norm_diff(&self, other: &GridMeasure) -> f64 {
        assert_eq!(self.len(), other.len());
        self.density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Prefix-trapezoid CDF at the nodes (1D).
    pub fn cdf_nodes(&self) -> Vec<f64> {
        debug_assert_eq!(self.dim, 1);
        let h = self.spec.spacing();
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 1..self.len() {
            acc += 0.5 * h * (self.density[i - 1] + self.density[i]);
            cdf.push(acc);
        }
        cdf
    }

    /// CDF at an arbitrary point, interpolating the piecewise-linear density
    /// (so the CDF is piecewise quadratic and exactly consistent with
    /// [`Self::quantile`]).
    pub fn cdf(&self, w: f64) -> f64 {
        self.cdf_with(&self.cdf_nodes(), w)
    }

    /// CDF evaluation against a precomputed [`Self::cdf_nodes`] table; use
    /// this in loops.
    pub fn cdf_with(&self, cdf: &[f64], w: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        if w <= -self.spec.l {
            return 0.0;
        }
        if w >= self.spec.l {
            return cdf.last().copied().unwrap_or(1.0);
        }
        let h = self.spec.spacing();
        let s = (w + self.spec.l) / h;
        let i = (s.floor() as usize).min(self.spec.n - 2);
        let t = (s - i as f64) * h;
        let (r0, r1) = (self.density[i], self.density[i + 1]);
        cdf[i] + r0 * t + 0.5 * (r1 - r0) / h * t * t
    }

    /// Inverse CDF (1D). `u` is clamped to the grid's total mass range.
    pub fn quantile(&self, u: f64) -> f64 {
        self.quantile_with(&self.cdf_nodes(), u)
    }

    /// Quantile against a precomputed [`Self::cdf_nodes`] table.
    pub fn quantile_with(&self, cdf: &[f64], u: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let total = *cdf.last().unwrap();
        let u = u.clamp(0.0, total);
        // binary search for the cell containing u
        let mut lo = 0usize;
        let mut hi = cdf.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cdf[mid] <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = self.spec.spacing();
        let (r0, r1) = (self.density[lo], self.density[lo + 1]);
        let du = u - cdf[lo];
        let a = 0.5 * (r1 - r0) / h;
        let t = if a.abs() < 1e-300 {
            if r0 > 0.0 {
                du / r0
            } else {
                0.5 * h
            }
        } else {
            // solve a t² + r0 t − du = 0 for t in [0, h]
            let disc = (r0 * r0 + 4.0 * a * du).max(0.0);
            let t = (-r0 + disc.sqrt()) / (2.0 * a);
            if t.is_finite() { t.clamp(0.0, h) } else { du / r0.max(1e-300) }
        };
        self.node(lo) + t
    }

    /// Deterministic inverse-CDF sampling; 2D samples the x-marginal then
    /// the conditional row nearest the sampled x.
    pub fn sample(&self, n: usize, stream: RngStream) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::InvalidArgument { context: "sample size must be positive" });
        }
        self.expect_normalized("sample")?;
        match self.dim {
            1 => {
                let cdf = self.cdf_nodes();
                let data = (0..n as u64)
                    .map(|k| self.quantile_with(&cdf, stream.uniform_at(k)))
                    .collect();
                Ok(ParticleEnsemble::new(1, data))
            }
            _ => {
                let nx = self.spec.n;
                // x-marginal by trapezoid over y
                let marginal: Vec<f64> = (0..nx)
                    .map(|ix| {
                        let row: Vec<f64> = (0..nx)
                            .map(|iy| self.trap_weight(ix * nx + iy) * self.density[ix * nx + iy])
                            .collect();
                        pairwise_sum(&row) / self.trap_weight_axis(ix)
                    })
                    .collect();
                let mut mx = GridMeasure::from_values_1d(self.spec, marginal);
                mx.normalize();
                let mut data = Vec::with_capacity(2 * n);
                for k in 0..n as u64 {
                    let x = mx.quantile(stream.uniform_at(2 * k));
                    let ix = (((x + self.spec.l) / self.spec.spacing()).round() as usize)
                        .min(nx - 1);
                    let row: Vec<f64> =
                        (0..nx).map(|iy| self.density[ix * nx + iy]).collect();
                    let mut cond = GridMeasure::from_values_1d(self.spec, row);
                    cond.normalize();
                    let y = cond.quantile(stream.uniform_at(2 * k + 1));
                    data.push(x);
                    data.push(y);
                }
                Ok(ParticleEnsemble::new(2, data))
            }
        }
    }

    fn trap_weight_axis(&self, k: usize) -> f64 {
        let h = self.spec.spacing();
        if k == 0 || k == self.spec.n - 1 {
            0.5 * h
        } else {
            h
        }
    }
}

// ---------------------------------------------------------------------------
// ParticleEnsemble
// ---------------------------------------------------------------------------

/// `N` weight vectors in ℝᵈ, stored flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    data: Vec<f64>,
    /// (seed, stream) the ensemble was drawn with, when known.
    pub lineage: Option<(u64, u64)>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim >= 1 && !data.is_empty() && data.len().is_multiple_of(dim));
        assert!(data.iter().all(|x| x.is_finite()), "particle coordinates must be finite");
        Self { dim, data, lineage: None }
    }

    pub fn new_1d(data: Vec<f64>) -> Self {
        Self::new(1, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Scalar accessor for 1D ensembles.
    pub fn scalar(&self, i: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn second_moment(&self) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .map(|i| self.particle(i).iter().map(|x| x * x).sum::<f64>())
            .collect();
        pairwise_sum(&terms) / self.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Divergences and distances
// ---------------------------------------------------------------------------

/// Reference measure for [`kl_divergence`].
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Gaussian(&'a GaussianPrior),
    Grid(&'a GridMeasure),
}

/// Relative entropy D(μ‖ref) by trapezoid rule, with 0·log 0 := 0.
pub fn kl_divergence(mu: &GridMeasure, reference: Reference<'_>) -> Result<f64> {
    mu.expect_normalized("kl_divergence")?;
    let ref_density = |i: usize| -> Result<f64> {
        match reference {
            Reference::Gaussian(p) => {
                if p.dim() != mu.dim() {
                    return Err(Error::DimensionMismatch {
                        context: "kl_divergence",
                        expected: mu.dim(),
                        got: p.dim(),
                    });
                }
                let d = match mu.dim() {
                    1 => p.density(&[mu.node(i)]),
                    _ => p.density(&[
                        mu.spec().node(i / mu.spec().n),
                        mu.spec().node(i % mu.spec().n),
                    ]),
                };
                Ok(d)
            }
            Reference::Grid(nu) => {
                if nu.dim() != mu.dim() || nu.len() != mu.len() {
                    return Err(Error::DimensionMismatch {
                        context: "kl_divergence",
                        expected: mu.len(),
                        got: nu.len(),
                    });
                }
                Ok(nu.density_at(i))
            }
        }
    };
    let mut terms = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let rho = mu.density_at(i);
        if rho <= 0.0 {
            terms.push(0.0);
            continue;
        }
        let r = ref_density(i)?;
        if r < 1e-300 {
            return Err(Error::SupportMismatch { node: mu.node(i.min(mu.spec().n - 1)) });
        }
        terms.push(mu.trap_weight(i) * rho * (rho / r).ln());
    }
    Ok(pairwise_sum(&terms))
}

/// Fisher information I(μ‖γτ) = ∫‖∇ log(ρ/ρ_γ)‖² dμ by centered differences
/// (one-sided at the boundary). 1D.
pub fn fisher_information(mu: &GridMeasure, prior: &GaussianPrior) -> Result<f64> {
    mu.expect_normalized("fisher_information")?;
    if mu.dim() != 1 || prior.dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "fisher_information",
            expected: 1,
            got: mu.dim().max(prior.dim()),
        });
    }
    let n = mu.len();
    let h = mu.spacing();
    let logratio: Vec<f64> = (0..n)
        .map(|i| {
            let rho = mu.density_at(i).max(1e-300);
            rho.ln() - prior.log_density(&[mu.node(i)])
        })
        .collect();
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let g = if i == 0 {
            (logratio[1] - logratio[0]) / h
        } else if i == n - 1 {
            (logratio[n - 1] - logratio[n - 2]) / h
        } else {
            (logratio[i + 1] - logratio[i - 1]) / (2.0 * h)
        };
        terms.push(mu.trap_weight(i) * mu.density_at(i) * g * g);
    }
    Ok(pairwise_sum(&terms))
}

fn quantile_curve(mu: &GridMeasure, points: usize) -> Vec<f64> {
    let cdf = mu.cdf_nodes();
    (0..points)
        .map(|m| mu.quantile_with(&cdf, (m as f64 + 0.5) / points as f64))
        .collect()
}

/// Exact-ish 1D W₂ between grid measures via the inverse-CDF integral on a
/// midpoint quantile grid.
pub fn wasserstein2_grid(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    mu.expect_normalized("wasserstein2")?;
    nu.expect_normalized("wasserstein2")?;
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2 (grid measures are 1D only)",
            expected: 1,
            got: mu.dim().max(nu.dim()),
        });
    }
    let qm = quantile_curve(mu, W2_QUANTILE_POINTS);
    let qn = quantile_curve(nu, W2_QUANTILE_POINTS);
    let terms: Vec<f64> = qm.iter().zip(&qn).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok((pairwise_sum(&terms) / W2_QUANTILE_POINTS as f64).sqrt())
}

/// 1D W₂ between a grid measure and the Gaussian prior (prior quantiles in
/// closed form).
pub fn wasserstein2_grid_gaussian(mu: &GridMeasure, prior: &GaussianPrior) -> Result<f64> {
    mu.expect_normalized("wasserstein2")?;
    if mu.dim() != 1 || prior.dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2 (grid vs prior is 1D only)",
            expected: 1,
            got: mu.dim().max(prior.dim()),
        });
    }
    let m = W2_QUANTILE_POINTS;
    let cdf = mu.cdf_nodes();
    let terms: Vec<f64> = (0..m)
        .map(|k| {
            let u = (k as f64 + 0.5) / m as f64;
            let a = mu.quantile_with(&cdf, u);
            let b = prior.quantile_1d(u);
            (a - b) * (a - b)
        })
        .collect();
    Ok((pairwise_sum(&terms) / m as f64).sqrt())
}

/// W₂ between equal-size ensembles: sort-match in 1D, exact assignment for
/// d ≤ 3 and N ≤ 512.
pub fn wasserstein2_ensembles(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2 (equal-N ensembles required)",
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if a.dim() == 1 {
        let mut xs: Vec<f64> = a.data().to_vec();
        let mut ys: Vec<f64> = b.data().to_vec();
        xs.sort_unstable_by(f64::total_cmp);
        ys.sort_unstable_by(f64::total_cmp);
        let terms: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).collect();
        return Ok((pairwise_sum(&terms) / n as f64).sqrt());
    }
    if a.dim() > 3 {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2 (assignment solver limited to d <= 3)",
            expected: 3,
            got: a.dim(),
        });
    }
    if n > 512 {
        return Err(Error::InvalidArgument {
            context: "wasserstein2 assignment solver limited to N <= 512",
        });
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let c: f64 = a
                .particle(i)
                .iter()
                .zip(b.particle(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            cost[i * n + j] = c;
        }
    }
    let total = hungarian_min_cost(&cost, n);
    Ok((total / n as f64).sqrt())
}

/// O(n³) Hungarian algorithm (potentials + shortest augmenting paths);
/// returns the minimum total assignment cost.
fn hungarian_min_cost(cost: &[f64], n: usize) -> f64 {
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[(p[j] - 1) * n + (j - 1)];
    }
    total
}

/// Discrete convolution with the ε-variance Gaussian kernel, renormalized.
///
/// If ε < h²/10 the kernel is under-resolved: the input is returned
/// unchanged with a warning.
pub fn convolve_gaussian(mu: &GridMeasure, eps: f64) -> GridMeasure {
    assert!(eps > 0.0 && eps.is_finite());
    let h = mu.spacing();
    if eps < h * h / 10.0 {
        log::warn!("convolve_gaussian: eps={eps:e} under-resolved for h={h:e}; returning input unchanged");
        return mu.clone();
    }
    let sigma = eps.sqrt();
    let reach = ((8.0 * sigma / h).ceil() as usize).max(1);
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| {
            let x = k as f64 * h;
            (-x * x / (2.0 * eps)).exp()
        })
        .collect();
    match mu.dim() {
        1 => {
            let n = mu.len();
            let mut out = vec![0.0; n];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = kernel[0] * mu.density_at(i);
                for k in 1..=reach {
                    let lo = i.checked_sub(k).map(|j| mu.density_at(j)).unwrap_or(0.0);
                    let hi = if i + k < n { mu.density_at(i + k) } else { 0.0 };
                    acc += kernel[k] * (lo + hi);
                }
                *o = acc;
            }
            let mut m = GridMeasure { dim: 1, spec: mu.spec(), density: out, normalized: false };
            m.normalize();
            m
        }
        _ => {
            // separable: convolve along each axis
            let n = mu.spec().n;
            let pass = |src: &[f64], transpose: bool| -> Vec<f64> {
                let mut out = vec![0.0; n * n];
                for a in 0..n {
                    for b in 0..n {
                        let get = |bb: isize| -> f64 {
                            if bb < 0 || bb >= n as isize {
                                return 0.0;
                            }
                            let (x, y) = if transpose { (bb as usize, a) } else { (a, bb as usize) };
                            src[x * n + y]
                        };
                        let mut acc = kernel[0] * get(b as isize);
                        for k in 1..=reach {
                            acc += kernel[k] * (get(b as isize - k as isize) + get(b as isize + k as isize));
                        }
                        let (x, y) = if transpose { (b, a) } else { (a, b) };
                        out[x * n + y] = acc;
                    }
                }
                out
            };
            let tmp = pass(mu.density_values(), false);
            let out = pass(&tmp, true);
            let mut m = GridMeasure { dim: 2, spec: mu.spec(), density: out, normalized: false };
            m.normalize();
            m
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    const TAU: f64 = 0.04;

    fn grid_for_tau(tau: f64) -> GridSpec {
        GridSpec::with_max_spacing(8.0 * tau.sqrt(), tau.sqrt() / 8.0)
    }

    #[test]
    fn kl_of_prior_discretization_is_zero() {
        let prior = GaussianPrior::new(TAU, 1);
        let mu = prior.discretize(grid_for_tau(TAU));
        let d = kl_divergence(&mu, Reference::Gaussian(&prior)).unwrap();
        assert!(d.abs() <= 1e-9, "D(gamma_tau || gamma_tau) = {d:e}");
    }

    #[test]
    fn kl_of_shifted_gaussian_matches_closed_form() {
        // D(N(m, tau) || N(0, tau)) = m²/(2 tau) = 1.125 for m = 0.3
        let spec = GridSpec::with_max_spacing(2.0, TAU.sqrt() / 12.0);
        let prior = GaussianPrior::new(TAU, 1);
        let mu = GridMeasure::gaussian_1d(spec, 0.3, TAU);
        let d = kl_divergence(&mu, Reference::Gaussian(&prior)).unwrap();
        assert_relative_eq!(d, 1.125, epsilon = 1e-6);
    }

    #[test]
    fn kl_decreases_under_mixing_toward_prior() {
        let spec = GridSpec::with_max_spacing(2.0, TAU.sqrt() / 10.0);
        let prior = GaussianPrior::new(TAU, 1);
        let prior_grid = prior.discretize(spec);
        let mu = GridMeasure::gaussian_1d(spec, 0.3, TAU / 2.0);
        let d0 = kl_divergence(&mu, Reference::Gaussian(&prior)).unwrap();
        for &t in &[0.25, 0.5] {
            let mut mixed = GridMeasure::from_fn_1d(spec, |_| 0.0);
            for i in 0..mixed.len() {
                mixed.density[i] = (1.0 - t) * mu.density_at(i) + t * prior_grid.density_at(i);
            }
            mixed.normalize();
            let dm = kl_divergence(&mixed, Reference::Gaussian(&prior)).unwrap();
            assert!(dm <= (1.0 - t) * d0 + 1e-12, "convexity violated at t={t}: {dm} > {}", (1.0 - t) * d0);
        }
    }

    #[test]
    fn kl_to_grid_reference_and_support_mismatch() {
        let spec = GridSpec::new(1.0, 101);
        let mu = GridMeasure::gaussian_1d(spec, 0.0, 0.02);
        let nu = GridMeasure::gaussian_1d(spec, 0.1, 0.02);
        let d = kl_divergence(&mu, Reference::Grid(&nu)).unwrap();
        assert!(d > 0.0);
        // a reference with a hole where mu has mass
        let mut hole = nu.clone();
        let mid = hole.len() / 2;
        hole.density[mid] = 0.0;
        let err = kl_divergence(&mu, Reference::Grid(&hole)).unwrap_err();
        assert!(matches!(err, Error::SupportMismatch { .. }));
    }

    #[test]
    fn w2_of_identical_measure_is_zero() {
        let spec = grid_for_tau(TAU);
        let mu = GridMeasure::gaussian_1d(spec, 0.1, TAU);
        assert_eq!(wasserstein2_grid(&mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn w2_translation_identity() {
        // W2(N(0,tau), N(m,tau)) = |m|
        let spec = GridSpec::with_max_spacing(2.4, TAU.sqrt() / 10.0);
        let prior = GaussianPrior::new(TAU, 1);
        let mu = GridMeasure::gaussian_1d(spec, 0.5, TAU);
        let w = wasserstein2_grid_gaussian(&mu, &prior).unwrap();
        assert_abs_diff_eq!(w, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn w2_quantile_grid_convergence_guard() {
        let spec = GridSpec::with_max_spacing(2.4, TAU.sqrt() / 10.0);
        let mu = GridMeasure::gaussian_1d(spec, 0.3, TAU);
        let nu = GridMeasure::gaussian_1d(spec, -0.2, 1.5 * TAU);
        let full = wasserstein2_grid(&mu, &nu).unwrap();
        let qm = quantile_curve(&mu, W2_QUANTILE_POINTS / 2);
        let qn = quantile_curve(&nu, W2_QUANTILE_POINTS / 2);
        let terms: Vec<f64> = qm.iter().zip(&qn).map(|(a, b)| (a - b) * (a - b)).collect();
        let half = (pairwise_sum(&terms) / (W2_QUANTILE_POINTS / 2) as f64).sqrt();
        assert!((full - half).abs() < 1e-5, "quantile-grid sensitivity {}", (full - half).abs());
    }

    #[test]
    fn w2_ensembles_shifted_point_sets() {
        let a = ParticleEnsemble::new_1d(vec![0.0, 1.0, 2.0, 3.0]);
        let b = ParticleEnsemble::new_1d(vec![0.5, 1.5, 2.5, 3.5]);
        assert_relative_eq!(wasserstein2_ensembles(&a, &b).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn w2_assignment_matches_sort_match_in_1d() {
        // run the Hungarian path on 1D data lifted to d=2 with zero y
        let s = RngStream::new(11, stream::PROBE);
        let n = 64;
        let xs: Vec<f64> = (0..n).map(|k| s.normal_at(k as u64)).collect();
        let ys: Vec<f64> = (0..n).map(|k| 0.3 + 0.8 * s.normal_at((n + k) as u64)).collect();
        let a1 = ParticleEnsemble::new_1d(xs.clone());
        let b1 = ParticleEnsemble::new_1d(ys.clone());
        let w_sort = wasserstein2_ensembles(&a1, &b1).unwrap();
        let lift = |v: &[f64]| -> Vec<f64> { v.iter().flat_map(|&x| [x, 0.0]).collect() };
        let a2 = ParticleEnsemble::new(2, lift(&xs));
        let b2 = ParticleEnsemble::new(2, lift(&ys));
        let w_assign = wasserstein2_ensembles(&a2, &b2).unwrap();
        assert_relative_eq!(w_sort, w_assign, epsilon = 1e-10);
    }

    #[test]
    fn second_moments() {
        let prior = GaussianPrior::new(TAU, 1);
        let mu = prior.discretize(grid_for_tau(TAU));
        assert_abs_diff_eq!(mu.second_moment(), TAU, epsilon = 1e-6);

        let spec = GridSpec::new(2.0, 401);
        let delta = GridMeasure::delta_like_1d(spec, 0.75);
        let w0 = delta.node(((0.75 + 2.0) / spec.spacing()).round() as usize);
        assert_relative_eq!(delta.second_moment(), w0 * w0, epsilon = 1e-12);

        // ½N(−1, 0.05) + ½N(1, 0.05): M2 = 1 + 0.05 = 1.05
        let spec = GridSpec::with_max_spacing(2.8, 0.01);
        let mix = GridMeasure::mixture_1d(spec, &[(0.5, -1.0, 0.05), (0.5, 1.0, 0.05)]);
        assert_abs_diff_eq!(mix.second_moment(), 1.05, epsilon = 1e-5);
    }

    #[test]
    fn differential_entropy_closed_forms() {
        let prior = GaussianPrior::new(TAU, 1);
        let mu = prior.discretize(grid_for_tau(TAU));
        let expected = 0.5 * (2.0 * core::f64::consts::PI * core::f64::consts::E * TAU).ln();
        assert_abs_diff_eq!(mu.differential_entropy(), expected, epsilon = 1e-6);

        let spec = GridSpec::new(1.5, 301);
        let uni = GridMeasure::uniform_1d(spec);
        assert_abs_diff_eq!(uni.differential_entropy(), (2.0 * 1.5f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn entropy_increases_under_convolution() {
        let spec = GridSpec::with_max_spacing(2.8, 0.008);
        let mix = GridMeasure::mixture_1d(spec, &[(0.5, -1.0, 0.05), (0.5, 1.0, 0.05)]);
        let h0 = mix.differential_entropy();
        let smoothed = convolve_gaussian(&mix, 4e-3);
        assert!(smoothed.differential_entropy() >= h0, "entropy must not decrease");
    }

    #[test]
    fn convolution_of_delta_recovers_gaussian() {
        let spec = GridSpec::new(1.6, 641); // h = 0.005
        let h = spec.spacing();
        let eps = 4.0 * h * h * 100.0; // comfortably resolved
        let delta = GridMeasure::delta_like_1d(spec, 0.0);
        let conv = convolve_gaussian(&delta, eps);
        let mut gauss = GridMeasure::gaussian_1d(spec, 0.0, eps);
        gauss.normalize();
        assert!(conv.sup_norm_diff(&gauss) <= 1e-6, "sup diff {}", conv.sup_norm_diff(&gauss));
        assert_abs_diff_eq!(conv.integral(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn convolution_underresolved_is_noop() {
        let spec = GridSpec::new(1.0, 101);
        let mu = GridMeasure::gaussian_1d(spec, 0.0, 0.05);
        let h = spec.spacing();
        let out = convolve_gaussian(&mu, h * h / 20.0);
        assert_eq!(out, mu);
    }

    #[test]
    fn convolution_2d_conserves_mass() {
        let spec = GridSpec::new(1.0, 81);
        let prior = GaussianPrior::new(0.05, 2);
        let mu = prior.discretize(spec);
        let out = convolve_gaussian(&mu, 4e-3);
        assert_abs_diff_eq!(out.integral(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let prior = GaussianPrior::new(TAU, 1);
        let s = RngStream::new(9, stream::SAMPLER);
        let a = prior.sample(1000, s).unwrap();
        let b = prior.sample(1000, s).unwrap();
        assert_eq!(a.data(), b.data());
        let c = prior.sample(1000, RngStream::new(10, stream::SAMPLER)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn gaussian_sample_variance_within_clt_band() {
        let prior = GaussianPrior::new(TAU, 1);
        let n = 100_000;
        let e = prior.sample(n, RngStream::new(123, stream::SAMPLER)).unwrap();
        let var = e.second_moment();
        // Var of the sample second moment of N(0,tau) is 2 tau² / n
        let se = (2.0 * TAU * TAU / n as f64).sqrt();
        assert!((var - TAU).abs() <= 3.0 * se, "var {var} vs tau {TAU} (3se = {})", 3.0 * se);
    }

    #[test]
    fn grid_sampler_passes_ks_against_own_cdf() {
        let spec = GridSpec::with_max_spacing(2.8, 0.01);
        let mix = GridMeasure::mixture_1d(spec, &[(0.3, -1.0, 0.05), (0.7, 1.0, 0.05)]);
        let n = 4096;
        let e = mix.sample(n, RngStream::new(77, stream::SAMPLER)).unwrap();
        let d = crate::oracle::ks_statistic(e.data(), |w| mix.cdf(w)).unwrap();
        assert!(d <= 1.63 / (n as f64).sqrt(), "KS {d} over threshold");
    }

    #[test]
    fn sample_rejects_nonpositive_count() {
        let prior = GaussianPrior::new(TAU, 1);
        assert!(prior.sample(0, RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn kl_and_moments_in_two_dimensions() {
        let prior = GaussianPrior::new(0.05, 2);
        let spec = GridSpec::new(1.4, 141);
        let grid = prior.discretize(spec);
        let d = kl_divergence(&grid, Reference::Gaussian(&prior)).unwrap();
        assert!(d.abs() <= 1e-9, "2D self-KL {d:e}");
        // second moment of N(0, tau I_2) is 2 tau
        assert_abs_diff_eq!(grid.second_moment(), 0.10, epsilon = 1e-6);
        // shifted 2D Gaussian: KL = ||m||^2 / (2 tau)
        let mut shifted = GridMeasure::from_fn_2d(spec, |x, y| {
            prior.density(&[x - 0.2, y + 0.1])
        });
        shifted.normalize();
        let d = kl_divergence(&shifted, Reference::Gaussian(&prior)).unwrap();
        assert_abs_diff_eq!(d, 0.05 / (2.0 * 0.05), epsilon = 1e-6);
    }

    #[test]
    fn sampling_2d_marginals_are_sane() {
        let prior = GaussianPrior::new(0.09, 2);
        let spec = GridSpec::new(1.2, 161);
        let grid = prior.discretize(spec);
        let e = grid.sample(20_000, RngStream::new(5, stream::SAMPLER)).unwrap();
        let mean_x: f64 = (0..e.len()).map(|i| e.particle(i)[0]).sum::<f64>() / e.len() as f64;
        let var_x: f64 = (0..e.len()).map(|i| e.particle(i)[0].powi(2)).sum::<f64>() / e.len() as f64;
        assert!(mean_x.abs() < 0.01, "mean {mean_x}");
        assert!((var_x - 0.09).abs() < 0.005, "var {var_x}");
    }

    #[test]
    fn talagrand_holds_on_grid_measures() {
        let prior = GaussianPrior::new(TAU, 1);
        let spec = GridSpec::with_max_spacing(2.4, TAU.sqrt() / 10.0);
        for mu in [
            GridMeasure::gaussian_1d(spec, 0.2, TAU),
            GridMeasure::gaussian_1d(spec, -0.1, 0.6 * TAU),
            GridMeasure::mixture_1d(spec, &[(0.4, -0.3, 0.03), (0.6, 0.4, 0.05)]),
        ] {
            let w2 = wasserstein2_grid_gaussian(&mu, &prior).unwrap();
            let d = kl_divergence(&mu, Reference::Gaussian(&prior)).unwrap();
            assert!(
                w2 * w2 <= 2.0 * TAU * d + 1e-6,
                "Talagrand violated: W2² = {} vs 2 tau D = {}",
                w2 * w2,
                2.0 * TAU * d
            );
        }
    }

    #[test]
    fn log_sobolev_holds_on_grid_measures() {
        let prior = GaussianPrior::new(TAU, 1);
        let spec = GridSpec::with_max_spacing(2.4, TAU.sqrt() / 12.0);
        for mu in [
            GridMeasure::gaussian_1d(spec, 0.2, TAU),
            GridMeasure::gaussian_1d(spec, -0.1, 0.6 * TAU),
        ] {
            let d = kl_divergence(&mu, Reference::Gaussian(&prior)).unwrap();
            let i = fisher_information(&mu, &prior).unwrap();
            assert!(
                d <= 0.5 * TAU * i + 1e-6,
                "LSI violated: D = {d} vs (tau/2) I = {}",
                0.5 * TAU * i
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arbitrary_density() -> impl Strategy<Value = GridMeasure> {
            proptest::collection::vec(0.01f64..1.0, 65).prop_map(|raw| {
                let spec = GridSpec::new(1.0, 65);
                let mut m = GridMeasure::from_values_1d(spec, raw);
                m.normalize();
                m
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn kl_nonnegative(mu in arbitrary_density(), nu in arbitrary_density()) {
                let d = kl_divergence(&mu, Reference::Grid(&nu)).unwrap();
                prop_assert!(d >= -1e-9);
            }

            #[test]
            fn w2_triangle_inequality(a in arbitrary_density(), b in arbitrary_density(), c in arbitrary_density()) {
                let ab = wasserstein2_grid(&a, &b).unwrap();
                let bc = wasserstein2_grid(&b, &c).unwrap();
                let ac = wasserstein2_grid(&a, &c).unwrap();
                prop_assert!(ac <= ab + bc + 1e-8, "triangle violated: {} > {} + {}", ac, ab, bc);
            }
        }
    }
}
