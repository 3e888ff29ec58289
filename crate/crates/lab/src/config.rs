//! JSON experiment configuration and its resolution into core objects.
//!
//! Unknown keys are rejected; every run serializes the resolved config
//! next to its outputs so artifacts are reproducible from the file alone.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use meanfield_core::free_energy::{RegularizationParams, SolverConfig};
use meanfield_core::measures::{GridMeasure, GridSpec};
use meanfield_core::preset;
use meanfield_core::problem::{Activation, ProblemInstance, Target};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub params: ParamsConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub bridge: BridgeSection,
    #[serde(default)]
    pub corollary1: Corollary1Section,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
}

fn default_output_dir() -> String {
    "out".to_string()
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub activation: ActivationName,
    pub target: TargetConfig,
    #[serde(default = "default_quadrature_order")]
    pub quadrature_order: usize,
    #[serde(default = "default_data_box")]
    pub data_box: [f64; 2],
}

fn default_quadrature_order() -> usize {
    preset::QUADRATURE_ORDER
}

fn default_data_box() -> [f64; 2] {
    [-1.0, 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Tanh,
    GaussBump,
}

impl ActivationName {
    pub fn to_core(self) -> Activation {
        match self {
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::GaussBump => Activation::GaussBump,
        }
    }

    fn default_kappas(self) -> (f64, f64) {
        match self {
            ActivationName::Tanh => (preset::TANH_KAPPA1, preset::TANH_KAPPA2),
            ActivationName::GaussBump => (1.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    /// f = f̂(·; μ°) for a Gaussian mixture μ° = Σ (weight, mean, variance).
    Realizable {
        #[serde(default = "default_mixture")]
        components: Vec<(f64, f64, f64)>,
    },
    Sine {
        #[serde(default = "default_frequency")]
        frequency: f64,
    },
}

fn default_mixture() -> Vec<(f64, f64, f64)> {
    preset::REALIZABLE_MIXTURE.to_vec()
}

fn default_frequency() -> f64 {
    1.0
}

/// Either explicit (β, τ) or the lazy preset τ = ε²/d, β = ε.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamsConfig {
    Explicit { beta: f64, tau: f64 },
    Lazy { lazy: LazyParams },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LazyParams {
    pub epsilon: f64,
    pub d: usize,
}

impl ParamsConfig {
    pub fn to_core(self) -> Result<RegularizationParams> {
        let p = match self {
            ParamsConfig::Explicit { beta, tau } => RegularizationParams::new(beta, tau),
            ParamsConfig::Lazy { lazy } => RegularizationParams::lazy(lazy.epsilon, lazy.d),
        };
        p.map_err(|e| anyhow::anyhow!("invalid params: {e}"))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub box_halfwidth: f64,
    pub max_spacing: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self { tol: d.tol, max_iter: d.max_iter, damping: d.damping }
    }
}

impl SolverSection {
    pub fn to_core(self) -> SolverConfig {
        SolverConfig { tol: self.tol, max_iter: self.max_iter, damping: self.damping }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub n_particles: usize,
    pub n_steps: usize,
    pub seeds: usize,
    pub store_snapshots: bool,
    /// Dump full per-step ensembles every `snapshot_every` steps (0 = never).
    pub snapshot_every: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { n_particles: 1600, n_steps: 200, seeds: 4, store_snapshots: true, snapshot_every: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub gh_order: usize,
    /// t-probes of the conditional-drift check.
    pub t_probes: [f64; 2],
    pub drift_export_t_nodes: usize,
    pub drift_export_w_nodes: usize,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self {
            n_paths: 20_000,
            n_steps: 200,
            gh_order: 32,
            t_probes: [0.5, 0.9],
            drift_export_t_nodes: 21,
            drift_export_w_nodes: 101,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Corollary1Section {
    pub n_sweep: Vec<usize>,
    pub n_seeds: usize,
    pub delta: f64,
}

impl Default for Corollary1Section {
    fn default() -> Self {
        Self { n_sweep: vec![64, 256, 1024], n_seeds: 200, delta: 0.05 }
    }
}

/// Sweep axes; a command runs once per point of the axis it supports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub eta: Vec<f64>,
    pub n_particles: Vec<usize>,
}

impl SweepSection {
    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
            && self.tau.is_empty()
            && self.epsilon.is_empty()
            && self.eta.is_empty()
            && self.n_particles.is_empty()
    }
}

/// A fully resolved run: core objects plus the original config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub problem: ProblemInstance,
    pub params: RegularizationParams,
    pub grid: GridSpec,
    pub mu_circ: Option<GridMeasure>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).context("config schema violation")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.problem.quadrature_order == 0 {
            bail!("quadrature_order must be positive");
        }
        if self.problem.data_box[1] <= self.problem.data_box[0] {
            bail!("data_box must be nonempty");
        }
        if let TargetConfig::Realizable { components } = &self.problem.target {
            if components.is_empty() {
                bail!("realizable target needs at least one mixture component");
            }
            for &(w, _, v) in components {
                if w <= 0.0 || v <= 0.0 {
                    bail!("mixture weights and variances must be positive");
                }
            }
        }
        if self.dynamics.n_particles == 0 || self.dynamics.n_steps == 0 || self.dynamics.seeds == 0
        {
            bail!("dynamics section needs positive particles, steps, seeds");
        }
        Ok(())
    }

    /// Resolve into core objects with parameters overridden as requested.
    pub fn resolve_with(&self, params: RegularizationParams, seed: u64) -> Result<Resolved> {
        let (k1, k2) = self.problem.activation.default_kappas();
        let activation = self.problem.activation.to_core();
        let data_box = (self.problem.data_box[0], self.problem.data_box[1]);
        // the grid needs the mixture extent before the target exists
        let extent = match &self.problem.target {
            TargetConfig::Realizable { components } => components
                .iter()
                .map(|&(_, m, v)| m.abs() + 8.0 * v.sqrt())
                .fold(0.0f64, f64::max),
            TargetConfig::Sine { .. } => 1.6,
        };
        let grid = match self.grid {
            Some(g) => GridSpec::with_max_spacing(g.box_halfwidth, g.max_spacing),
            None => preset::grid_for(params.tau, extent),
        };
        let (target, mu_circ) = match &self.problem.target {
            TargetConfig::Realizable { components } => {
                let mu0 = GridMeasure::mixture_1d(grid, components);
                (Target::Realizable { mu0: mu0.clone(), activation }, Some(mu0))
            }
            TargetConfig::Sine { frequency } => (Target::Sine { frequency: *frequency }, None),
        };
        let problem = ProblemInstance::new(
            activation,
            target,
            self.problem.quadrature_order,
            data_box,
            k1,
            k2,
        )
        .map_err(|e| anyhow::anyhow!("problem construction: {e}"))?;
        Ok(Resolved { config: self.clone(), problem, params, grid, mu_circ, seed })
    }

    pub fn resolve(&self, seed_override: Option<u64>) -> Result<Resolved> {
        let params = self.params.to_core()?;
        self.resolve_with(params, seed_override.unwrap_or(self.master_seed))
    }
}
