//! Numerical core for entropy-regularized mean-field training of two-layer
//! neural nets.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`problem`]: the approximation problem `(f, σ, π)` and its risk
//!    kernels `f̃`, `K`, `Ψ`, evaluated by quadrature over a fixed data
//!    measure.
//! 2. [`measures`]: grid densities, Gaussian priors, and particle
//!    ensembles, plus the divergences (KL, W₂, entropy) the theory is
//!    stated in.
//! 3. [`free_energy`]: the free energy `½R(μ) + (τ/β)·D(μ‖γτ)`, the
//!    Boltzmann fixed-point solver for its minimizer `μ*`, and the 1D
//!    transport-map experiments.
//! 4. [`bridge`]: the value function, the minimum-energy (Föllmer) drift
//!    steering `√τ·B` to `μ*`, marginal densities, and bridge-energy
//!    estimates.
//! 5. [`dynamics`]: synchronously coupled simulations of the optimal
//!    McKean–Vlasov process, interacting particles, gradient descent, and
//!    SGD, with risk-gap decompositions.
//! 6. [`oracle`]: deliberately slow, independent reimplementations
//!    (dense Riemann sums, brute-force assignment, finite differences,
//!    PDE residuals) used by tests and the `verify` command.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) only switches float math from `libm` to the intrinsics and
//! implements `std::error::Error`. All computations are deterministic:
//! randomness comes from counter-based streams in [`rng`], and reductions
//! use pairwise summation.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// indexed loops over parallel arrays are the clearer idiom in the kernels
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod bridge;
pub mod dynamics;
pub mod error;
pub mod free_energy;
pub mod measures;
pub mod numeric;
pub mod oracle;
pub mod preset;
pub mod problem;
pub mod rng;

pub use error::{Error, Result};
