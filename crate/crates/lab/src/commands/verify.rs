//! `verify`: run the oracle suite against the configured problem and emit
//! one JSON line per check into `verify_report.jsonl`. Exit code 0 iff all
//! selected checks pass.

use std::sync::Arc;

use serde::Serialize;

use meanfield_core::bridge::{
    bridge_energy, conditional_drift_check, q_second_moment_check, BridgeConfig, DriftField,
    ValueFunctionField,
};
use meanfield_core::dynamics::{simulate_sgd, CouplingContext};
use meanfield_core::free_energy::{
    boltzmann_map_residual, free_energy, solve_boltzmann_fixed_point, verify_static_bounds,
    InitialGuess,
};
use meanfield_core::measures::{
    fisher_information, kl_divergence, wasserstein2_ensembles, wasserstein2_grid_gaussian,
    GridMeasure, ParticleEnsemble, Reference,
};
use meanfield_core::oracle::{self, OracleReport};
use meanfield_core::problem::MeasureRef;
use meanfield_core::rng::{stream, RngStream};

use crate::artifacts::{write_atomic, Provenance};
use crate::commands::{config_err, numerical, CmdError, CmdResult, RunContext};

#[derive(Debug, Serialize)]
struct ReportLine<'a> {
    name: &'a str,
    main_value: f64,
    oracle_value: f64,
    abs_err: f64,
    rel_err: f64,
    tolerance: f64,
    pass: bool,
    config_hash: &'a str,
    seed: u64,
}

struct Suite {
    reports: Vec<OracleReport>,
    only: Vec<String>,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.only.is_empty() || self.only.iter().any(|f| name.contains(f.as_str()))
    }

    fn push(&mut self, report: OracleReport) {
        log::info!(
            "{} {}: main {} vs oracle {} (tol {})",
            if report.pass { "PASS" } else { "FAIL" },
            report.name,
            report.main_value,
            report.oracle_value,
            report.tolerance
        );
        self.reports.push(report);
    }

    /// Manual report for checks whose pass-rule is not a plain tolerance.
    fn push_flag(&mut self, name: &str, main_value: f64, oracle_value: f64, pass: bool) {
        let abs_err = (main_value - oracle_value).abs();
        self.push(OracleReport {
            name: name.into(),
            main_value,
            oracle_value,
            abs_err,
            rel_err: abs_err / oracle_value.abs().max(1.0),
            tolerance: f64::NAN,
            pass,
        });
    }
}

pub fn run(ctx: &RunContext) -> CmdResult<()> {
    let dir = ctx.command_dir("verify");
    let r = ctx.config.resolve(ctx.seed_override).map_err(config_err)?;
    let prob = &r.problem;
    let params = r.params;
    let seed = ctx.seed();
    let mut suite = Suite { reports: Vec::new(), only: ctx.only.clone() };
    let wrap = |e: meanfield_core::Error| numerical(anyhow::anyhow!("{e}"));

    // --- kernel-level oracles ---
    if suite.wants("problem.f_tilde.dense_riemann") {
        let main = prob.f_tilde(1.0).map_err(wrap)?;
        let orc = oracle::dense_riemann_f_tilde(prob, 1.0, 1_000_000);
        suite.push(OracleReport::evaluate("problem.f_tilde.dense_riemann", main, orc, 1e-6));
    }
    if suite.wants("problem.k_kernel.dense_riemann") {
        let main = prob.k_kernel(1.0, 2.0).map_err(wrap)?;
        let orc = oracle::dense_riemann_k(prob, 1.0, 2.0, 1_000_000);
        suite.push(OracleReport::evaluate("problem.k_kernel.dense_riemann", main, orc, 1e-6));
    }
    if suite.wants("problem.psi.nested_quadrature") {
        let prior_grid = params.prior(1).discretize(r.grid);
        let main = prob.psi(0.5, MeasureRef::Grid(&prior_grid)).map_err(wrap)?;
        let orc = oracle::nested_quadrature_psi(prob, 0.5, params.tau, 20_000, 2_000);
        suite.push(OracleReport::evaluate("problem.psi.nested_quadrature", main, orc, 1e-5));
    }
    if suite.wants("problem.grad_psi.finite_difference") {
        let spec = r.grid;
        let sstream = RngStream::new(seed, stream::PROBE);
        let mut worst: f64 = 0.0;
        for k in 0..20u64 {
            let w = 2.0 * sstream.uniform_at(2 * k) - 1.0;
            let mean = 0.5 * sstream.uniform_at(2 * k + 1) - 0.25;
            let mu = GridMeasure::gaussian_1d(spec, mean, params.tau.max(0.01));
            let f_hat = prob.f_hat_nodes(MeasureRef::Grid(&mu)).map_err(wrap)?;
            let analytic = prob.grad_psi_with_f_hat(w, &f_hat).map_err(wrap)?;
            let fd = oracle::finite_difference_gradient(
                |x| prob.psi_with_f_hat(x, &f_hat).unwrap(),
                w,
                1e-5,
            );
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(1e-9));
        }
        suite.push(OracleReport::evaluate("problem.grad_psi.finite_difference", worst, 0.0, 1e-6));
    }
    if suite.wants("problem.risk.pointwise_vs_kernel") {
        let mu = GridMeasure::mixture_1d(r.grid, &[(0.6, -0.5, 0.03), (0.4, 0.8, 0.05)]);
        let main = prob.risk_of_measure(&mu).map_err(wrap)?;
        let orc = oracle::pointwise_risk(prob, &mu);
        suite.push(OracleReport::evaluate("problem.risk.pointwise_vs_kernel", main, orc, 1e-10));
    }
    if suite.wants("problem.risk.double_sum") {
        let sstream = RngStream::new(seed, stream::PROBE);
        let data: Vec<f64> = (100..108).map(|k| 2.0 * sstream.normal_at(k)).collect();
        let e = ParticleEnsemble::new_1d(data);
        let main = prob.risk_of_ensemble(&e).map_err(wrap)?;
        let orc = oracle::double_sum_risk(prob, &e).map_err(wrap)?;
        suite.push(OracleReport::evaluate("problem.risk.double_sum", main, orc, 1e-12));
    }
    if suite.wants("measures.w2.sort_vs_brute_force") {
        let sstream = RngStream::new(seed, stream::PROBE);
        let mut worst: f64 = 0.0;
        for trial in 0..20u64 {
            let a: Vec<f64> = (0..6).map(|i| sstream.normal_at(trial * 16 + i)).collect();
            let b: Vec<f64> = (0..6).map(|i| sstream.normal_at(trial * 16 + 8 + i)).collect();
            let ea = ParticleEnsemble::new_1d(a);
            let eb = ParticleEnsemble::new_1d(b);
            let fast = wasserstein2_ensembles(&ea, &eb).map_err(wrap)?;
            let slow = oracle::brute_force_assignment_w2(&ea, &eb).map_err(wrap)?;
            worst = worst.max((fast - slow).abs());
        }
        suite.push(OracleReport::evaluate("measures.w2.sort_vs_brute_force", worst, 0.0, 1e-12));
    }

    // --- solver checks ---
    let solver_cfg = ctx.config.solver.to_core();
    let sol = solve_boltzmann_fixed_point(prob, params, r.grid, solver_cfg, InitialGuess::Prior)
        .map_err(wrap)?;
    if suite.wants("solver.self_consistency") {
        let res = boltzmann_map_residual(prob, params, &sol.mu_star).map_err(wrap)?;
        suite.push(OracleReport::evaluate("solver.self_consistency", res, 0.0, solver_cfg.tol));
    }
    if suite.wants("solver.initialization_independence") {
        let alt = solve_boltzmann_fixed_point(prob, params, r.grid, solver_cfg, InitialGuess::Uniform)
            .map_err(wrap)?;
        let sup = sol.mu_star.sup_norm_diff(&alt.mu_star);
        suite.push(OracleReport::evaluate("solver.initialization_independence", sup, 0.0, 1e-8));
    }
    if suite.wants("solver.dense_map_oracle") {
        let mapped = oracle::boltzmann_map_dense(prob, params.beta, params.tau, &sol.mu_star);
        let sup = sol.mu_star.sup_norm_diff(&mapped);
        suite.push(OracleReport::evaluate("solver.dense_map_oracle", sup, 0.0, 1e-6));
    }
    if suite.wants("static_bounds.risk_le_twice_fe") || suite.wants("static_bounds.realizable_bound") {
        let rep = verify_static_bounds(prob, params, &sol, r.mu_circ.as_ref()).map_err(wrap)?;
        if suite.wants("static_bounds.risk_le_twice_fe") {
            suite.push_flag(
                "static_bounds.risk_le_twice_fe",
                rep.risk_star,
                2.0 * rep.free_energy_star,
                rep.risk_le_twice_fe,
            );
        }
        if suite.wants("static_bounds.realizable_bound") {
            if let (Some(bound), Some(holds)) = (rep.realizable_bound, rep.realizable_holds) {
                suite.push_flag("static_bounds.realizable_bound", rep.risk_star, bound, holds);
            }
        }
    }
    if suite.wants("measures.talagrand_on_solution") {
        let prior = params.prior(1);
        let w2 = wasserstein2_grid_gaussian(&sol.mu_star, &prior).map_err(wrap)?;
        let d = kl_divergence(&sol.mu_star, Reference::Gaussian(&prior)).map_err(wrap)?;
        suite.push_flag(
            "measures.talagrand_on_solution",
            w2 * w2,
            2.0 * params.tau * d,
            w2 * w2 <= 2.0 * params.tau * d + 1e-6,
        );
    }
    if suite.wants("measures.lsi_on_solution") {
        let prior = params.prior(1);
        let d = kl_divergence(&sol.mu_star, Reference::Gaussian(&prior)).map_err(wrap)?;
        let i = fisher_information(&sol.mu_star, &prior).map_err(wrap)?;
        suite.push_flag(
            "measures.lsi_on_solution",
            d,
            0.5 * params.tau * i,
            d <= 0.5 * params.tau * i + 1e-6,
        );
    }

    // --- bridge checks ---
    let bcfg = BridgeConfig { gh_order: ctx.config.bridge.gh_order, ..BridgeConfig::default() };
    let vf = Arc::new(ValueFunctionField::new(prob, &sol, bcfg).map_err(wrap)?);
    if suite.wants("bridge.drift_vs_value_gradient") {
        let sstream = RngStream::new(seed, stream::PROBE);
        let mut worst: f64 = 0.0;
        for k in 0..100u64 {
            let w = 1.6 * sstream.uniform_at(2 * k) - 0.8;
            let t = 0.9 * sstream.uniform_at(2 * k + 1);
            let u = vf.drift(w, t);
            let fd = -oracle::finite_difference_gradient(|x| vf.value(x, t), w, 1e-5);
            worst = worst.max((u - fd).abs() / u.abs().max(1e-6));
        }
        suite.push(OracleReport::evaluate("bridge.drift_vs_value_gradient", worst, 0.0, 1e-4));
    }
    let probe_w = 0.5 * r.grid.l.min(1.0);
    if suite.wants("bridge.heat_residual_order") {
        let h = |w: f64, t: f64| vf.cole_hopf_h(w, t);
        let rep = oracle::pde_residual(
            &oracle::PdeField::BackwardHeat { h: &h },
            params.tau, (-probe_w, probe_w), (0.1, 0.9), 0.02, 0.02, 3,
        );
        suite.push(OracleReport::evaluate("bridge.heat_residual_order", rep.order_sup, 2.0, 0.15));
    }
    if suite.wants("bridge.hjb_residual_order") {
        let v = |w: f64, t: f64| vf.value(w, t);
        let rep = oracle::pde_residual(
            &oracle::PdeField::Hjb { v: &v },
            params.tau, (-probe_w, probe_w), (0.1, 0.9), 0.02, 0.02, 3,
        );
        suite.push(OracleReport::evaluate("bridge.hjb_residual_order", rep.order_sup, 2.0, 0.15));
    }
    if suite.wants("bridge.fpe_residual_order") {
        let v = |w: f64, t: f64| vf.value(w, t);
        let rho = |w: f64, t: f64| vf.marginal_density_raw(w, t);
        let rep = oracle::pde_residual(
            &oracle::PdeField::FokkerPlanck { rho: &rho, v: &v },
            params.tau, (-probe_w, probe_w), (0.2, 0.9), 0.02, 0.01, 3,
        );
        suite.push(OracleReport::evaluate("bridge.fpe_residual_order", rep.order_sup, 2.0, 0.15));
    }
    if suite.wants("bridge.terminal_marginal_vs_solver") {
        let m1 = vf.bridge_marginal_density(1.0).map_err(wrap)?;
        suite.push(OracleReport::evaluate(
            "bridge.terminal_marginal_vs_solver",
            m1.sup_norm_diff(&sol.mu_star),
            0.0,
            1e-6,
        ));
    }
    let bs = &ctx.config.bridge;
    if params.beta > 0.0 && suite.wants("bridge.energy_identity") {
        let drift = DriftField::follmer(vf.clone());
        let rep = bridge_energy(&drift, prob, params.tau, params.beta, bs.n_paths, bs.n_steps, seed)
            .map_err(wrap)?;
        let prior = params.prior(1);
        let d = kl_divergence(vf.mu_star(), Reference::Gaussian(&prior)).map_err(wrap)?;
        let expected = params.tau * d;
        let tol = (0.05 * expected.abs()).max(3.0 * rep.energy_se) / expected.abs().max(1.0);
        suite.push(OracleReport::evaluate("bridge.energy_identity", rep.energy, expected, tol.max(1e-12)));
        let f_star = free_energy(prob, params, vf.mu_star()).map_err(wrap)?;
        let expected_cost = params.beta * f_star;
        let tol_cost =
            (0.05 * expected_cost.abs()).max(3.0 * rep.total_cost_se) / expected_cost.abs().max(1.0);
        suite.push(OracleReport::evaluate(
            "bridge.total_cost_identity",
            rep.total_cost,
            expected_cost,
            tol_cost.max(1e-12),
        ));
    }
    if suite.wants("bridge.terminal_law_ks") {
        let drift = DriftField::follmer(vf.clone());
        let cctx = CouplingContext {
            seed,
            n_particles: bs.n_paths,
            n_steps: bs.n_steps,
            noise_refine: 1,
            decouple: false,
            store_snapshots: false,
            sgd_epochs: 1,
        };
        let sim = meanfield_core::dynamics::simulate_mkv(&cctx, prob, params, &drift).map_err(wrap)?;
        let ks = oracle::ks_statistic(sim.terminal.data(), |x| sol.mu_star.cdf(x)).map_err(wrap)?;
        suite.push(OracleReport::evaluate("bridge.terminal_law_ks", ks, 0.0, 0.02));
    }
    if suite.wants("bridge.conditional_drift") {
        for &t_probe in &bs.t_probes {
            let rep = conditional_drift_check(&vf, t_probe, bs.n_paths, bs.n_steps, seed)
                .map_err(wrap)?;
            suite.push_flag(
                &format!("bridge.conditional_drift.t{t_probe}"),
                rep.fraction_within_3sigma,
                1.0,
                rep.pass,
            );
        }
    }
    if suite.wants("bridge.q_moment") {
        let t_grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let rep = q_second_moment_check(&vf, &[-0.3, 0.0, 0.3], &t_grid);
        let scale = params.beta * params.beta + params.tau;
        suite.push_flag(
            "bridge.q_moment.slope_within_factor_3",
            rep.fitted_a,
            scale,
            rep.nonincreasing && rep.fitted_a <= 3.0 * scale && rep.fitted_a >= scale / 3.0,
        );
    }

    // --- dynamics checks ---
    if suite.wants("dynamics.sgd_conditional_mean") {
        let (xs, pw) = prob.data_nodes();
        let ws = [0.3, -0.8, 1.1, 0.05];
        let mut f_hat = vec![0.0; xs.len()];
        for (j, &x) in xs.iter().enumerate() {
            f_hat[j] =
                ws.iter().map(|&w| prob.activation().eval(x, w)).sum::<f64>() / ws.len() as f64;
        }
        let mut worst: f64 = 0.0;
        for &w in &ws {
            let mut expectation = 0.0;
            for (j, &x) in xs.iter().enumerate() {
                expectation += pw[j]
                    * params.beta
                    * (prob.f_at_node(j) - f_hat[j])
                    * prob.activation().grad_w(x, w);
            }
            let gd = -params.beta * prob.grad_psi_plain(w, &f_hat);
            worst = worst.max((expectation - gd).abs());
        }
        suite.push(OracleReport::evaluate("dynamics.sgd_conditional_mean", worst, 0.0, 1e-10));
    }
    if suite.wants("dynamics.determinism") {
        let cctx = CouplingContext::new(seed, 64, 16);
        let a = simulate_sgd(&cctx, prob, params).map_err(wrap)?;
        let b = simulate_sgd(&cctx, prob, params).map_err(wrap)?;
        let worst = a
            .terminal
            .data()
            .iter()
            .zip(b.terminal.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        suite.push(OracleReport::evaluate("dynamics.determinism", worst, 0.0, 0.0));
    }

    // --- stored artifacts, when present ---
    let stored = ctx.command_dir("solve").join("mu_star.csv");
    if stored.exists() && suite.wants("stored_solution.residual") {
        match crate::artifacts::load_solution(&ctx.command_dir("solve")) {
            Ok(stored_sol) => {
                if (stored_sol.params.beta - params.beta).abs() < 1e-12
                    && (stored_sol.params.tau - params.tau).abs() < 1e-12
                    && stored_sol.mu_star.len() == r.grid.n
                {
                    let res =
                        boltzmann_map_residual(prob, params, &stored_sol.mu_star).map_err(wrap)?;
                    suite.push(OracleReport::evaluate(
                        "stored_solution.residual",
                        res,
                        0.0,
                        2.0 * solver_cfg.tol,
                    ));
                } else {
                    log::info!("stored solution has different parameters; skipping residual check");
                }
            }
            Err(e) => {
                log::warn!("stored solution unreadable: {e:#}");
                suite.push_flag("stored_solution.residual", f64::NAN, 0.0, false);
            }
        }
    }

    // --- report ---
    let resolved_json = serde_json::to_string_pretty(&ctx.config).map_err(numerical)?;
    let prov = Provenance::new("verify", &resolved_json, seed);
    let mut jsonl = String::new();
    for rep in &suite.reports {
        let line = ReportLine {
            name: &rep.name,
            main_value: rep.main_value,
            oracle_value: rep.oracle_value,
            abs_err: rep.abs_err,
            rel_err: rep.rel_err,
            tolerance: rep.tolerance,
            pass: rep.pass,
            config_hash: &prov.config_hash,
            seed,
        };
        jsonl.push_str(&serde_json::to_string(&line).map_err(numerical)?);
        jsonl.push('\n');
    }
    write_atomic(&dir.join("verify_report.jsonl"), jsonl.as_bytes()).map_err(numerical)?;
    ctx.stamp(&dir, "verify").map_err(numerical)?;

    let failures = suite.reports.iter().filter(|r| !r.pass).count();
    let total = suite.reports.len();
    log::info!("verify: {}/{} checks passed", total - failures, total);
    if failures > 0 {
        return Err(CmdError::Verification(failures));
    }
    Ok(())
}
