//! `dynamics`: run the four coupled processes over the configured seeds
//! (and sweep axis, if any), stream trajectory CSVs, and summarize the gap
//! decomposition.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use meanfield_core::bridge::{BridgeConfig, DriftField, ValueFunctionField};
use meanfield_core::dynamics::{
    gap_decomposition, reference_risk_flow, simulate_gd, simulate_mkv, simulate_particle,
    simulate_sgd, CouplingContext, SimResult, TrajectoryLog,
};
use meanfield_core::free_energy::RegularizationParams;
use meanfield_core::numeric::log_log_fit;
use serde::Serialize;

use crate::artifacts::{fmt_f64, write_grid_measure, write_json, CsvBuilder};
use crate::commands::{config_err, numerical, CmdResult, RunContext};
use crate::config::Resolved;

pub(crate) struct DynPoint {
    pub label: String,
    pub params: RegularizationParams,
    pub n_particles: usize,
    pub n_steps: usize,
}

/// One coupled four-process run and its assembled log.
pub(crate) struct CoupledRun {
    pub mkv: SimResult,
    pub particle: SimResult,
    pub gd: SimResult,
    pub sgd: SimResult,
    pub log: TrajectoryLog,
}

fn sweep_points(ctx: &RunContext, base: RegularizationParams) -> CmdResult<Vec<DynPoint>> {
    let d = &ctx.config.dynamics;
    let sweep = &ctx.config.sweep;
    let mut points = Vec::new();
    if !sweep.eta.is_empty() {
        for &eta in &sweep.eta {
            if eta <= 0.0 || eta > 1.0 {
                return Err(config_err(anyhow::anyhow!("sweep eta {eta} out of (0, 1]")));
            }
            let n_steps = (1.0 / eta).round() as usize;
            points.push(DynPoint {
                label: format!("eta_{}", fmt_f64(eta)),
                params: base,
                n_particles: d.n_particles,
                n_steps,
            });
        }
    } else if !sweep.n_particles.is_empty() {
        for &n in &sweep.n_particles {
            points.push(DynPoint {
                label: format!("n_{n}"),
                params: base,
                n_particles: n,
                n_steps: d.n_steps,
            });
        }
    } else if !sweep.epsilon.is_empty() {
        for &e in &sweep.epsilon {
            points.push(DynPoint {
                label: format!("epsilon_{}", fmt_f64(e)),
                params: RegularizationParams::lazy(e, 1)
                    .map_err(|e| config_err(anyhow::anyhow!("{e}")))?,
                n_particles: d.n_particles,
                n_steps: d.n_steps,
            });
        }
    } else {
        points.push(DynPoint {
            label: String::new(),
            params: base,
            n_particles: d.n_particles,
            n_steps: d.n_steps,
        });
    }
    Ok(points)
}

pub(crate) fn run_point_with_vf(
    r: &Resolved,
    point: &DynPoint,
    seed: u64,
    vf: &Arc<ValueFunctionField>,
) -> CmdResult<CoupledRun> {
    let ctx = CouplingContext {
        seed,
        n_particles: point.n_particles,
        n_steps: point.n_steps,
        noise_refine: 1,
        decouple: false,
        store_snapshots: true,
        sgd_epochs: 1,
    };
    let drift = DriftField::follmer(vf.clone());
    let wrap = |e: meanfield_core::Error| numerical(anyhow::anyhow!("{e}"));
    let mkv = simulate_mkv(&ctx, &r.problem, point.params, &drift).map_err(wrap)?;
    let particle = simulate_particle(&ctx, &r.problem, point.params).map_err(wrap)?;
    let gd = simulate_gd(&ctx, &r.problem, point.params).map_err(wrap)?;
    let sgd = simulate_sgd(&ctx, &r.problem, point.params).map_err(wrap)?;
    let flow = reference_risk_flow(vf, &r.problem, point.n_steps).map_err(wrap)?;
    let log = gap_decomposition(&flow, &mkv, &particle, &gd, &sgd).map_err(wrap)?;
    Ok(CoupledRun { mkv, particle, gd, sgd, log })
}

fn write_trajectory(path: &Path, log: &TrajectoryLog) -> CmdResult<()> {
    let mut csv = CsvBuilder::new(
        "k,t,risk_mkv,risk_particle,risk_gd,risk_sgd,risk_ref,gap1,gap2,gap3,gap4,maxdist_mkv_particle,maxdist_gd_sgd",
    );
    for row in &log.rows {
        csv.row(&[
            format!("{}", row.k),
            fmt_f64(row.t),
            fmt_f64(row.risk_mkv),
            fmt_f64(row.risk_particle),
            fmt_f64(row.risk_gd),
            fmt_f64(row.risk_sgd),
            fmt_f64(row.risk_ref),
            fmt_f64(row.gap_sampling),
            fmt_f64(row.gap_mkv_particle),
            fmt_f64(row.gap_particle_gd),
            fmt_f64(row.gap_gd_sgd),
            fmt_f64(row.maxdist_mkv_particle),
            fmt_f64(row.maxdist_gd_sgd),
        ]);
    }
    csv.write(path).map_err(numerical)
}

/// Scaling fit over a sweep axis, written as `sweep_fit.json`.
#[derive(Debug, Serialize)]
struct SweepFit {
    axis: String,
    quantity: String,
    /// (axis value, seed-mean of the quantity) pairs.
    points: Vec<(f64, f64)>,
    slope: f64,
    r2: f64,
}

/// Tracking-gap table for an ε sweep: seed-mean total tracking gap per ε.
#[derive(Debug, Serialize)]
struct EpsilonRow {
    epsilon: f64,
    beta: f64,
    tau: f64,
    mean_max_total_gap: f64,
    mean_init_gap: f64,
}

/// One CSV per dumped step: the four process states side by side.
fn write_snapshots(dir: &Path, run: &CoupledRun, every: usize) -> CmdResult<()> {
    for (k, mkv) in run.mkv.snapshots.iter().enumerate().step_by(every) {
        let mut csv = CsvBuilder::new("particle,mkv,particle_dynamics,gd,sgd");
        for (i, &w_mkv) in mkv.iter().enumerate() {
            csv.row(&[
                format!("{i}"),
                fmt_f64(w_mkv),
                fmt_f64(run.particle.snapshots[k][i]),
                fmt_f64(run.gd.snapshots[k][i]),
                fmt_f64(run.sgd.snapshots[k][i]),
            ]);
        }
        csv.write(&dir.join(format!("snapshot_step{k:06}.csv"))).map_err(numerical)?;
    }
    Ok(())
}

pub fn run(ctx: &RunContext) -> CmdResult<()> {
    let dir = ctx.command_dir("dynamics");
    let base = ctx.config.params.to_core().map_err(config_err)?;
    let points = sweep_points(ctx, base)?;
    let seeds = ctx.config.dynamics.seeds;
    let snapshot_every = ctx.config.dynamics.snapshot_every;
    let single = points.len() == 1 && points[0].label.is_empty();

    let pool = ctx.pool().map_err(config_err)?;
    type PointOut = (String, Vec<(u64, CoupledRun)>);
    let results: Vec<CmdResult<PointOut>> = pool.install(|| {
        points
            .par_iter()
            .map(|point| {
                let r = ctx.config.resolve_with(point.params, ctx.seed()).map_err(config_err)?;
                // solve once per point, reuse across seeds
                let sol = super::solve::solve_resolved(&r)?;
                let vf = Arc::new(
                    ValueFunctionField::new(&r.problem, &sol, BridgeConfig::default())
                        .map_err(|e| numerical(anyhow::anyhow!("{e}")))?,
                );
                let mut runs = Vec::with_capacity(seeds);
                for s in 0..seeds {
                    let seed = ctx.seed().wrapping_add(s as u64);
                    runs.push((seed, run_point_with_vf(&r, point, seed, &vf)?));
                }
                Ok((point.label.clone(), runs))
            })
            .collect()
    });

    let mut summary = CsvBuilder::new(
        "label,seed,max_gap_sampling,max_gap_mkv_particle,max_gap_particle_gd,max_gap_gd_sgd,max_total_gap,init_gap,triangle_ok",
    );
    let mut point_means: Vec<(String, f64, f64)> = Vec::new(); // label, mean gd-sgd gap, mean sampling gap
    let mut epsilon_rows: Vec<EpsilonRow> = Vec::new();
    for (res, point) in results.into_iter().zip(&points) {
        let (label, runs) = res?;
        let mean = |f: &dyn Fn(&CoupledRun) -> f64| {
            runs.iter().map(|(_, r)| f(r)).sum::<f64>() / runs.len() as f64
        };
        point_means.push((
            label.clone(),
            mean(&|r| r.log.max_gaps[3]),
            mean(&|r| r.log.max_gaps[0]),
        ));
        if !ctx.config.sweep.epsilon.is_empty() {
            epsilon_rows.push(EpsilonRow {
                epsilon: point.params.beta,
                beta: point.params.beta,
                tau: point.params.tau,
                mean_max_total_gap: mean(&|r| r.log.max_total_gap),
                mean_init_gap: mean(&|r| r.log.init_gap),
            });
        }
        let point_dir = if single { dir.clone() } else { dir.join(&label) };
        for (i, (seed, run)) in runs.iter().enumerate() {
            write_trajectory(&point_dir.join(format!("trajectory_seed{seed}.csv")), &run.log)?;
            if snapshot_every > 0 && i == 0 {
                write_snapshots(&point_dir, run, snapshot_every)?;
            }
            summary.row(&[
                if label.is_empty() { "default".to_string() } else { label.clone() },
                format!("{seed}"),
                fmt_f64(run.log.max_gaps[0]),
                fmt_f64(run.log.max_gaps[1]),
                fmt_f64(run.log.max_gaps[2]),
                fmt_f64(run.log.max_gaps[3]),
                fmt_f64(run.log.max_total_gap),
                fmt_f64(run.log.init_gap),
                format!("{}", run.log.triangle_ok),
            ]);
        }
    }
    summary.write(&dir.join("gaps_summary.csv")).map_err(numerical)?;

    // scaling fits over the active sweep axis
    if !ctx.config.sweep.eta.is_empty() {
        let xs: Vec<f64> = ctx.config.sweep.eta.clone();
        let ys: Vec<f64> = point_means.iter().map(|(_, gd_sgd, _)| *gd_sgd).collect();
        let fit = log_log_fit(&xs, &ys);
        write_json(
            &dir.join("sweep_fit.json"),
            &SweepFit {
                axis: "eta".to_string(),
                quantity: "max_gap_gd_sgd".to_string(),
                points: xs.into_iter().zip(ys).collect(),
                slope: fit.slope,
                r2: fit.r2,
            },
        )
        .map_err(numerical)?;
    } else if !ctx.config.sweep.n_particles.is_empty() {
        let xs: Vec<f64> = ctx.config.sweep.n_particles.iter().map(|&n| n as f64).collect();
        let ys: Vec<f64> = point_means.iter().map(|(_, _, sampling)| *sampling).collect();
        let fit = log_log_fit(&xs, &ys);
        write_json(
            &dir.join("sweep_fit.json"),
            &SweepFit {
                axis: "n_particles".to_string(),
                quantity: "max_gap_sampling".to_string(),
                points: xs.into_iter().zip(ys).collect(),
                slope: fit.slope,
                r2: fit.r2,
            },
        )
        .map_err(numerical)?;
    } else if !epsilon_rows.is_empty() {
        write_json(&dir.join("tracking_gap_table.json"), &epsilon_rows).map_err(numerical)?;
    }

    // persist the fixed point backing the reference flow, for plotting
    if single {
        let r = ctx.config.resolve_with(base, ctx.seed()).map_err(config_err)?;
        let sol = super::solve::solve_resolved(&r)?;
        write_grid_measure(&dir.join("mu_star.csv"), &sol.mu_star).map_err(numerical)?;
    }
    ctx.stamp(&dir, "dynamics").map_err(numerical)?;
    log::info!(
        "dynamics: {} point(s) x {seeds} seed(s) under {}",
        points.len(),
        dir.display()
    );
    Ok(())
}
