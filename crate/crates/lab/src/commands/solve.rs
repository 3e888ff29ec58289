//! `solve`: compute μ* (optionally along a sweep axis), verify the static
//! bounds of its static characterization, and persist solution + report
//! artifacts.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use meanfield_core::free_energy::{
    verify_static_bounds, FixedPointSolution, RegularizationParams, StaticBoundsReport,
};

use crate::artifacts::{fmt_f64, write_json, write_solution, CsvBuilder};
use crate::commands::{config_err, numerical, CmdError, CmdResult, RunContext};
use crate::config::Resolved;

#[derive(Debug, Serialize)]
struct StaticBoundsJson {
    risk_star: f64,
    free_energy_star: f64,
    kl_star: f64,
    w2_sq_star: f64,
    realizable_bound: Option<f64>,
    risk_le_twice_fe: bool,
    realizable_holds: Option<bool>,
}

impl From<&StaticBoundsReport> for StaticBoundsJson {
    fn from(r: &StaticBoundsReport) -> Self {
        Self {
            risk_star: r.risk_star,
            free_energy_star: r.free_energy_star,
            kl_star: r.kl_star,
            w2_sq_star: r.w2_sq_star,
            realizable_bound: r.realizable_bound,
            risk_le_twice_fe: r.risk_le_twice_fe,
            realizable_holds: r.realizable_holds,
        }
    }
}

/// One sweep point: a label for the subdirectory plus its parameters.
pub(crate) fn sweep_points(
    ctx: &RunContext,
    base: RegularizationParams,
) -> Vec<(String, RegularizationParams)> {
    let sweep = &ctx.config.sweep;
    if !sweep.beta.is_empty() {
        return sweep
            .beta
            .iter()
            .map(|&b| {
                (format!("beta_{}", fmt_f64(b)), RegularizationParams { beta: b, tau: base.tau })
            })
            .collect();
    }
    if !sweep.tau.is_empty() {
        return sweep
            .tau
            .iter()
            .map(|&t| {
                (format!("tau_{}", fmt_f64(t)), RegularizationParams { beta: base.beta, tau: t })
            })
            .collect();
    }
    if !sweep.epsilon.is_empty() {
        return sweep
            .epsilon
            .iter()
            .map(|&e| {
                (
                    format!("epsilon_{}", fmt_f64(e)),
                    RegularizationParams::lazy(e, 1).expect("positive epsilon"),
                )
            })
            .collect();
    }
    vec![(String::new(), base)]
}

pub(crate) fn solve_core(r: &Resolved) -> meanfield_core::Result<FixedPointSolution> {
    meanfield_core::free_energy::solve_boltzmann_fixed_point(
        &r.problem,
        r.params,
        r.grid,
        r.config.solver.to_core(),
        meanfield_core::free_energy::InitialGuess::Prior,
    )
}

pub(crate) fn solve_resolved(r: &Resolved) -> CmdResult<FixedPointSolution> {
    solve_core(r).map_err(|e| numerical(anyhow::anyhow!("{e}")))
}

pub fn run(ctx: &RunContext) -> CmdResult<()> {
    let dir = ctx.command_dir("solve");
    let base = ctx.config.params.to_core().map_err(config_err)?;
    let points = sweep_points(ctx, base);
    let single = points.len() == 1 && points[0].0.is_empty();

    let pool = ctx.pool().map_err(config_err)?;
    let results: Vec<CmdResult<(String, RegularizationParams, FixedPointSolution, StaticBoundsReport)>> =
        pool.install(|| {
            points
                .par_iter()
                .map(|(label, params)| {
                    let r = ctx
                        .config
                        .resolve_with(*params, ctx.seed())
                        .map_err(config_err)?;
                    let sol = match solve_core(&r) {
                        Ok(s) => s,
                        Err(e) => {
                            // persist the continuation trace for diagnosis
                            let mut trace = CsvBuilder::new("beta,residual");
                            if let meanfield_core::Error::NonConvergence { trace: t, .. } = &e {
                                for &(b, res) in t {
                                    trace.row_f64(&[b, res]);
                                }
                            }
                            let _ = write_json(
                                &dir.join(label).join("failure.json"),
                                &format!("{e}"),
                            );
                            let _ = trace.write(&dir.join(label).join("continuation_trace.csv"));
                            return Err(numerical(anyhow::anyhow!("{e}")));
                        }
                    };
                    let report = verify_static_bounds(&r.problem, *params, &sol, r.mu_circ.as_ref())
                        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
                    Ok((label.clone(), *params, sol, report))
                })
                .collect()
        });

    let mut summary = CsvBuilder::new(
        "label,beta,tau,risk_star,free_energy_star,kl_star,w2_sq_star,residual,iterations,realizable_bound",
    );
    let mut rows = Vec::new();
    for res in results {
        rows.push(res?);
    }
    for (label, params, sol, report) in &rows {
        let point_dir = if single { dir.clone() } else { dir.join(label) };
        write_solution(&point_dir, sol).map_err(numerical)?;
        write_json(&point_dir.join("static_bounds_report.json"), &StaticBoundsJson::from(report))
            .map_err(numerical)?;
        summary.row(&[
            if label.is_empty() { "default".to_string() } else { label.clone() },
            fmt_f64(params.beta),
            fmt_f64(params.tau),
            fmt_f64(report.risk_star),
            fmt_f64(report.free_energy_star),
            fmt_f64(report.kl_star),
            fmt_f64(report.w2_sq_star),
            fmt_f64(sol.residual),
            format!("{}", sol.iterations),
            report.realizable_bound.map(fmt_f64).unwrap_or_default(),
        ]);
        if report.realizable_holds == Some(false) || !report.risk_le_twice_fe {
            return Err(CmdError::Numerical(anyhow::anyhow!(
                "static-bounds assertion failed at point {label:?}; see static_bounds_report.json"
            )));
        }
    }
    summary.write(&dir.join("sweep_summary.csv")).map_err(numerical)?;
    ctx.stamp(&dir, "solve").map_err(numerical)?;
    log::info!("solve: wrote {} point(s) under {}", rows.len(), dir.display());
    Ok(())
}

/// Load the default solve artifacts, or explain how to produce them.
pub(crate) fn load_default_solution(dir: &Path) -> CmdResult<FixedPointSolution> {
    crate::artifacts::load_solution(dir).map_err(config_err)
}
