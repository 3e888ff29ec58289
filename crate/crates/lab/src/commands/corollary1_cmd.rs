//! `corollary1`: quantile tables for the transported-net experiment across
//! the configured N sweep (and β sweep, when given).

use rayon::prelude::*;
use serde::Serialize;

use meanfield_core::free_energy::{corollary1_experiment, Corollary1Report, RegularizationParams};

use crate::artifacts::{fmt_f64, write_json, CsvBuilder};
use crate::commands::{config_err, numerical, CmdResult, RunContext};

#[derive(Debug, Serialize)]
struct MaureyJson {
    beta: f64,
    risk_floor: f64,
    exponent: f64,
    prefactor: f64,
    n_seeds: usize,
    delta: f64,
}

pub fn run(ctx: &RunContext) -> CmdResult<()> {
    let dir = ctx.command_dir("corollary1");
    let base = ctx.config.params.to_core().map_err(config_err)?;
    let betas: Vec<f64> = if ctx.config.sweep.beta.is_empty() {
        vec![base.beta]
    } else {
        ctx.config.sweep.beta.clone()
    };
    let c1 = ctx.config.corollary1.clone();

    let pool = ctx.pool().map_err(config_err)?;
    let results: Vec<CmdResult<(f64, Corollary1Report)>> = pool.install(|| {
        betas
            .par_iter()
            .map(|&beta| {
                let params = RegularizationParams::new(beta, base.tau)
                    .map_err(|e| config_err(anyhow::anyhow!("{e}")))?;
                let r = ctx.config.resolve_with(params, ctx.seed()).map_err(config_err)?;
                let sol = super::solve::solve_resolved(&r)?;
                let report = corollary1_experiment(
                    &r.problem,
                    params,
                    &sol,
                    &c1.n_sweep,
                    c1.n_seeds,
                    c1.delta,
                    ctx.seed(),
                )
                .map_err(|e| numerical(anyhow::anyhow!("{e}")))?;
                Ok((beta, report))
            })
            .collect()
    });

    let mut csv = CsvBuilder::new(
        "beta,n_particles,transported_risk_mean,transported_risk_q,max_displacement_mean,max_displacement_q,coupling_gap_sq_mean,coupling_gap_sq_q,risk_floor",
    );
    let mut fits = Vec::new();
    for res in results {
        let (beta, report) = res?;
        for row in &report.rows {
            csv.row(&[
                fmt_f64(beta),
                format!("{}", row.n_particles),
                fmt_f64(row.transported_risk.mean),
                fmt_f64(row.transported_risk.upper_quantile),
                fmt_f64(row.max_displacement.mean),
                fmt_f64(row.max_displacement.upper_quantile),
                fmt_f64(row.coupling_gap_sq.mean),
                fmt_f64(row.coupling_gap_sq.upper_quantile),
                fmt_f64(report.risk_floor),
            ]);
        }
        fits.push(MaureyJson {
            beta,
            risk_floor: report.risk_floor,
            exponent: report.maurey_exponent,
            prefactor: report.maurey_prefactor,
            n_seeds: report.n_seeds,
            delta: report.delta,
        });
    }
    csv.write(&dir.join("corollary1.csv")).map_err(numerical)?;
    write_json(&dir.join("maurey_fits.json"), &fits).map_err(numerical)?;
    ctx.stamp(&dir, "corollary1").map_err(numerical)?;
    log::info!("corollary1: wrote quantile tables for {} beta value(s)", fits.len());
    Ok(())
}
