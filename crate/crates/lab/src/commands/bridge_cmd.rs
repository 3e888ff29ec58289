//! `bridge`: build the value-function field from stored solve artifacts,
//! export the drift, and run the energy / PDE / terminal-law checks.

use std::sync::Arc;

use serde::Serialize;

use meanfield_core::bridge::{
    bridge_energy, conditional_drift_check, q_second_moment_check, BridgeConfig, DriftField,
    ValueFunctionField,
};
use meanfield_core::dynamics::{simulate_mkv, CouplingContext};
use meanfield_core::free_energy::free_energy;
use meanfield_core::measures::{kl_divergence, wasserstein2_ensembles, Reference};
use meanfield_core::oracle;

use crate::artifacts::{fmt_f64, write_json, CsvBuilder};
use crate::commands::{numerical, CmdResult, RunContext};

#[derive(Debug, Serialize)]
struct EnergyJson {
    energy: f64,
    energy_se: f64,
    expected_energy_tau_kl: f64,
    total_cost: f64,
    total_cost_se: f64,
    expected_cost_beta_fe: f64,
    terminal_risk: f64,
    n_paths: usize,
    n_steps: usize,
    energy_ok: bool,
    cost_ok: bool,
}

#[derive(Debug, Serialize)]
struct ResidualJson {
    equation: String,
    order_sup: f64,
    order_l2: f64,
    levels: Vec<(f64, f64, f64)>,
    ok: bool,
}

#[derive(Debug, Serialize)]
struct TerminalKsJson {
    ks: f64,
    ks_threshold: f64,
    euler_bias_w2: f64,
    bias_bound: f64,
    n_particles: usize,
    n_steps: usize,
    ok: bool,
}

#[derive(Debug, Serialize)]
struct ConditionalJson {
    t_probe: f64,
    n_bins: usize,
    fraction_within_3sigma: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct QMomentJson {
    nonincreasing: bool,
    fitted_a: f64,
    reference_scale: f64,
    worst_r2: f64,
}

#[derive(Debug, Serialize)]
struct DriftMeta {
    kind: String,
    solution_provenance: String,
    switch_time: f64,
    switch_threshold: f64,
}

pub fn run(ctx: &RunContext) -> CmdResult<()> {
    let dir = ctx.command_dir("bridge");
    let solve_dir = ctx.command_dir("solve");
    let sol = super::solve::load_default_solution(&solve_dir)?;
    let r = ctx.config.resolve_with(sol.params, ctx.seed()).map_err(super::config_err)?;
    let bcfg = BridgeConfig { gh_order: ctx.config.bridge.gh_order, ..BridgeConfig::default() };
    let vf = Arc::new(
        ValueFunctionField::new(&r.problem, &sol, bcfg).map_err(|e| numerical(anyhow::anyhow!("{e}")))?,
    );
    let params = vf.params();
    let drift = DriftField::follmer(vf.clone());

    // drift export: w × t lattice
    let spec = vf.mu_star().spec();
    let bs = &ctx.config.bridge;
    let mut csv = CsvBuilder::new("w,t,u");
    for it in 0..bs.drift_export_t_nodes {
        let t = it as f64 / (bs.drift_export_t_nodes - 1) as f64;
        for iw in 0..bs.drift_export_w_nodes {
            let w = -spec.l + 2.0 * spec.l * iw as f64 / (bs.drift_export_w_nodes - 1) as f64;
            csv.row_f64(&[w, t, drift.eval(w, t)]);
        }
    }
    csv.write(&dir.join("drift_field.csv")).map_err(numerical)?;
    write_json(
        &dir.join("drift_field.meta.json"),
        &DriftMeta {
            kind: drift.kind_name().to_string(),
            solution_provenance: format!("{:016x}", drift.provenance()),
            switch_time: 1.0 - vf.switch_threshold() / params.tau,
            switch_threshold: vf.switch_threshold(),
        },
    )
    .map_err(numerical)?;

    // Schrödinger energy identity
    let rep = bridge_energy(
        &drift,
        &r.problem,
        params.tau,
        params.beta,
        bs.n_paths,
        bs.n_steps,
        ctx.seed(),
    )
    .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
    let prior = params.prior(1);
    let kl = kl_divergence(vf.mu_star(), Reference::Gaussian(&prior))
        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
    let expected_energy = params.tau * kl;
    let expected_cost = if params.beta > 0.0 {
        params.beta
            * free_energy(&r.problem, params, vf.mu_star())
                .map_err(|e| numerical(anyhow::anyhow!("{e}")))?
    } else {
        0.0
    };
    let e_tol = (0.05 * expected_energy).max(3.0 * rep.energy_se);
    let c_tol = (0.05 * expected_cost).max(3.0 * rep.total_cost_se);
    write_json(
        &dir.join("energy_report.json"),
        &EnergyJson {
            energy: rep.energy,
            energy_se: rep.energy_se,
            expected_energy_tau_kl: expected_energy,
            total_cost: rep.total_cost,
            total_cost_se: rep.total_cost_se,
            expected_cost_beta_fe: expected_cost,
            terminal_risk: rep.terminal_risk,
            n_paths: rep.n_paths,
            n_steps: rep.n_steps,
            energy_ok: (rep.energy - expected_energy).abs() <= e_tol,
            cost_ok: (rep.total_cost - expected_cost).abs() <= c_tol,
        },
    )
    .map_err(numerical)?;

    // PDE residual orders
    let tau = params.tau;
    let probe_w = 0.5 * spec.l.min(1.0);
    let h_field = |w: f64, t: f64| vf.cole_hopf_h(w, t);
    let v_field = |w: f64, t: f64| vf.value(w, t);
    let rho_field = |w: f64, t: f64| vf.marginal_density_raw(w, t);
    let residuals = [
        ("backward-heat", oracle::pde_residual(
            &oracle::PdeField::BackwardHeat { h: &h_field }, tau,
            (-probe_w, probe_w), (0.1, 0.9), 0.02, 0.02, 3,
        )),
        ("hjb", oracle::pde_residual(
            &oracle::PdeField::Hjb { v: &v_field }, tau,
            (-probe_w, probe_w), (0.1, 0.9), 0.02, 0.02, 3,
        )),
        ("fokker-planck", oracle::pde_residual(
            &oracle::PdeField::FokkerPlanck { rho: &rho_field, v: &v_field }, tau,
            (-probe_w, probe_w), (0.2, 0.9), 0.02, 0.01, 3,
        )),
    ];
    let residual_json: Vec<ResidualJson> = residuals
        .iter()
        .map(|(name, rep)| ResidualJson {
            equation: name.to_string(),
            order_sup: rep.order_sup,
            order_l2: rep.order_l2,
            levels: rep.levels.iter().map(|l| (l.dw, l.sup, l.l2)).collect(),
            ok: (1.7..=2.3).contains(&rep.order_sup),
        })
        .collect();
    write_json(&dir.join("pde_residuals.json"), &residual_json).map_err(numerical)?;

    // terminal law + Euler bias by step-halving under matched noise
    let cctx = CouplingContext {
        seed: ctx.seed(),
        n_particles: bs.n_paths,
        n_steps: bs.n_steps,
        noise_refine: 2,
        decouple: false,
        store_snapshots: false,
        sgd_epochs: 1,
    };
    let coarse = simulate_mkv(&cctx, &r.problem, params, &drift)
        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
    let fine_ctx = CouplingContext { n_steps: 2 * bs.n_steps, noise_refine: 1, ..cctx };
    let fine = simulate_mkv(&fine_ctx, &r.problem, params, &drift)
        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
    let ks = oracle::ks_statistic(fine.terminal.data(), |x| vf.mu_star().cdf(x))
        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
    let bias = wasserstein2_ensembles(&coarse.terminal, &fine.terminal)
        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
    write_json(
        &dir.join("terminal_ks.json"),
        &TerminalKsJson {
            ks,
            ks_threshold: 0.02,
            euler_bias_w2: bias,
            bias_bound: 0.005,
            n_particles: bs.n_paths,
            n_steps: bs.n_steps,
            ok: ks <= 0.02 && bias <= 0.005,
        },
    )
    .map_err(numerical)?;

    // conditional-drift identity at the configured probes
    let mut cond = Vec::new();
    for &t_probe in &bs.t_probes {
        let rep = conditional_drift_check(&vf, t_probe, bs.n_paths, bs.n_steps, ctx.seed())
            .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
        cond.push(ConditionalJson {
            t_probe,
            n_bins: rep.bins.len(),
            fraction_within_3sigma: rep.fraction_within_3sigma,
            pass: rep.pass,
        });
    }
    write_json(&dir.join("conditional_drift.json"), &cond).map_err(numerical)?;

    // Q-measure concentration trace
    let t_grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let qrep = q_second_moment_check(&vf, &[-0.3, 0.0, 0.3], &t_grid);
    write_json(
        &dir.join("q_moment.json"),
        &QMomentJson {
            nonincreasing: qrep.nonincreasing,
            fitted_a: qrep.fitted_a,
            reference_scale: params.beta * params.beta + params.tau,
            worst_r2: qrep.worst_r2,
        },
    )
    .map_err(numerical)?;
    let mut qcsv = CsvBuilder::new("w,t,second_moment");
    for &(w, t, m) in &qrep.rows {
        qcsv.row_f64(&[w, t, m]);
    }
    qcsv.write(&dir.join("q_moment.csv")).map_err(numerical)?;

    log::info!(
        "bridge: energy {} (expected {}), terminal KS {}",
        fmt_f64(rep.energy),
        fmt_f64(expected_energy),
        fmt_f64(ks)
    );
    ctx.stamp(&dir, "bridge").map_err(numerical)?;
    Ok(())
}
