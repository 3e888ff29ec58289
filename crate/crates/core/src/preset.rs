//! Built-in problem families: `p = d = 1`, tanh activation, π uniform on
//! `[−1, 1]` via Gauss–Legendre(32).
//!
//! Targets:
//! * realizable: `f = f̂(·; μ°)` with `μ° = 0.3·N(−1, 0.05) + 0.7·N(1, 0.05)`
//!   truncated to the grid box. The weights are deliberately asymmetric:
//!   with tanh (odd in `w`) a symmetric mixture collapses to `f ≡ 0`.
//! * sine: `f(x) = sin(πx)`, not realizable by the tanh family.

use crate::error::Result;
use crate::free_energy::{
    solve_boltzmann_fixed_point, FixedPointSolution, InitialGuess, RegularizationParams,
    SolverConfig,
};
use crate::measures::{GridMeasure, GridSpec};
use crate::problem::{Activation, ProblemInstance, Target};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Default mixture components (weight, mean, variance) of μ°.
pub const REALIZABLE_MIXTURE: [(f64, f64, f64); 2] = [(0.3, -1.0, 0.05), (0.7, 1.0, 0.05)];

/// Default quadrature order of the data measure.
pub const QUADRATURE_ORDER: usize = 32;

/// Declared regularity constants for the builtin tanh family on |x| ≤ 1.
pub const TANH_KAPPA1: f64 = 1.0;
pub const TANH_KAPPA2: f64 = 1.5;

/// A ready-to-solve bundle: problem, parameters, solver grid, and (for the
/// realizable family) the generating measure μ°.
#[derive(Debug, Clone)]
pub struct LabPreset {
    pub problem: ProblemInstance,
    pub params: RegularizationParams,
    pub grid: GridSpec,
    pub mu_circ: Option<GridMeasure>,
}

impl LabPreset {
    pub fn solve_default(&self) -> Result<FixedPointSolution> {
        self.solve_with(SolverConfig::default())
    }

    pub fn solve_with(&self, cfg: SolverConfig) -> Result<FixedPointSolution> {
        solve_boltzmann_fixed_point(&self.problem, self.params, self.grid, cfg, InitialGuess::Prior)
    }
}

/// Solver grid for a given prior variance: box `[−L, L]` with
/// `L = max(8√τ, extent)` and spacing at most `√τ/12` (the solver requires
/// `√τ/8`; the extra margin keeps downstream trapezoid error comfortably
/// below the 1e-9 tolerances).
pub fn grid_for(tau: f64, extent: f64) -> GridSpec {
    let l = (8.0 * tau.sqrt()).max(extent);
    GridSpec::with_max_spacing(l, tau.sqrt() / 12.0)
}

/// Extent needed to hold the realizable mixture with < 1e-10 tail mass.
fn mixture_extent() -> f64 {
    REALIZABLE_MIXTURE
        .iter()
        .map(|&(_, mean, var)| mean.abs() + 8.0 * var.sqrt())
        .fold(0.0, f64::max)
}

/// The realizable preset: `f = f̂(·; μ°)` on the solver grid.
pub fn realizable(params: RegularizationParams) -> LabPreset {
    let grid = grid_for(params.tau, mixture_extent());
    let mu0 = GridMeasure::mixture_1d(grid, &REALIZABLE_MIXTURE);
    let problem = ProblemInstance::new(
        Activation::Tanh,
        Target::Realizable { mu0: mu0.clone(), activation: Activation::Tanh },
        QUADRATURE_ORDER,
        (-1.0, 1.0),
        TANH_KAPPA1,
        TANH_KAPPA2,
    )
    .expect("builtin problem construction cannot fail");
    LabPreset { problem, params, grid, mu_circ: Some(mu0) }
}

/// The non-realizable preset: `f(x) = sin(πx)`.
pub fn sine(params: RegularizationParams) -> LabPreset {
    // the sine target keeps mass near the origin; 8√τ (with a floor for
    // very small τ) is enough box
    let grid = grid_for(params.tau, 1.6);
    let problem = ProblemInstance::new(
        Activation::Tanh,
        Target::Sine { frequency: 1.0 },
        QUADRATURE_ORDER,
        (-1.0, 1.0),
        TANH_KAPPA1,
        TANH_KAPPA2,
    )
    .expect("builtin problem construction cannot fail");
    LabPreset { problem, params, grid, mu_circ: None }
}
