//! `audit`: checks that direct marginals equal the marginalized joint.
//!
//! For every instance and every queried variable, three densities are
//! computed on a shared grid and overlaid in an SVG (with the numbers in a
//! CSV beside it):
//!
//! - the directly predicted univariate marginal,
//! - the joint density numerically integrated over the other variables,
//! - a histogram of the variable's coordinate in joint samples.
//!
//! The first two must agree within the audit tolerance for the audit to
//! pass — that comparison is the library's marginalization-consistency
//! guarantee checked end to end on a real checkpoint. The histogram is
//! diagnostic texture: it shows what the sampler actually produces at the
//! file's instances.

use std::path::Path;

use marconflow::audit::{audit_codes, AuditConfig, InstanceAudit};
use marconflow::model::MosesModel;
use marconflow::series::TimeSeriesInstance;
use marconflow::train::load_checkpoint;
use marconflow::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{load_nonempty, Normalizer};
use crate::svg::{line_chart, Curve};

/// Audits every instance in the file; returns whether all of them passed.
pub fn run(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<bool> {
    let data_path = data
        .or(cfg.dataset.test.as_deref())
        .ok_or_else(|| Error::Validation("no data file: pass --data or set dataset.test".into()))?;
    let (model, _, manifest) = load_checkpoint(checkpoint)?;
    let normalizer = Normalizer::from_manifest(&manifest)?;
    let raw = load_nonempty(data_path)?;
    let mut instances = raw.clone();
    normalizer.apply(&mut instances);
    cfg.audit.validate()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Validation(format!("worker pool: {e}")))?;
    log::info!(
        "auditing {} instances on {}-point grids with {} workers",
        instances.len(),
        cfg.audit.grid_points,
        pool.current_num_threads()
    );
    let results: Vec<(InstanceAudit, Vec<Histogram>)> = pool.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| audit_instance(&model, inst, &cfg.audit, cfg.eval.n_samples, cfg.seed, i))
            .collect::<Result<_>>()
    })?;

    cfg.write_resolved()?;
    let mut passed = true;
    for (i, ((audit, histograms), original)) in results.iter().zip(&raw).enumerate() {
        passed &= audit.passed;
        for (var, hist) in audit.variables.iter().zip(histograms) {
            let k = var.variable;
            let q = &original.query[k];
            let title = format!(
                "instance {i}, variable {k} (t={}, c={}) — max rel gap {:.2e}",
                q.t, q.c, var.max_rel_gap
            );
            let chart = line_chart(
                &title,
                "y (model space)",
                &[
                    Curve {
                        label: "sample histogram",
                        x: &hist.x,
                        y: &hist.density,
                        color: "#999999",
                        dash: "",
                    },
                    Curve {
                        label: "direct marginal",
                        x: &var.grid,
                        y: &var.direct_pdf,
                        color: "#1f77b4",
                        dash: "",
                    },
                    Curve {
                        label: "marginalized joint",
                        x: &var.grid,
                        y: &var.marginalized_pdf,
                        color: "#d62728",
                        dash: "6 4",
                    },
                ],
            );
            let stem = format!("audit_i{i:03}_v{k}");
            std::fs::write(cfg.out.join(format!("{stem}.svg")), chart)?;
            std::fs::write(cfg.out.join(format!("{stem}.csv")), curves_csv(var, hist))?;
            if !var.passed {
                log::error!(
                    "instance {i} variable {k}: max relative gap {:.3e} exceeds {:.1e}",
                    var.max_rel_gap,
                    audit.tolerance
                );
            }
        }
    }
    let report = serde_json::json!({
        "tolerance": cfg.audit.tolerance,
        "passed": passed,
        "instances": results.iter().map(|(a, _)| a).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("serialize audit report: {e}")))?;
    std::fs::write(cfg.out.join("audit_report.json"), text)?;
    log::info!("audit {}", if passed { "passed" } else { "FAILED" });
    Ok(passed)
}

/// Binned sample density for one variable: `x` holds step-outline points.
struct Histogram {
    x: Vec<f64>,
    density: Vec<f64>,
    /// Per-bin densities aligned with the grid for the CSV.
    per_grid: Vec<f64>,
}

fn audit_instance(
    model: &MosesModel,
    inst: &TimeSeriesInstance,
    audit_cfg: &AuditConfig,
    n_samples: usize,
    seed: u64,
    index: usize,
) -> Result<(InstanceAudit, Vec<Histogram>)> {
    let codes = model.codes(&inst.context, &inst.query)?;
    let audit = audit_codes(&codes, audit_cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let draws: Vec<Vec<f64>> =
        (0..n_samples).map(|_| codes.sample(&mut rng)).collect::<Result<_>>()?;
    let histograms = audit
        .variables
        .iter()
        .map(|var| {
            let coord: Vec<f64> = draws.iter().map(|d| d[var.variable]).collect();
            histogram(&coord, &var.grid)
        })
        .collect();
    Ok((audit, histograms))
}

/// Bins `values` into the grid's intervals and normalizes to a density.
/// Samples outside the grid (possible: the grid covers ±4 base standard
/// deviations, the sampler has no such cutoff) are dropped from the bars
/// but still counted in the normalization, so the shown mass is honest.
fn histogram(values: &[f64], grid: &[f64]) -> Histogram {
    let bins = grid.len() - 1;
    let mut counts = vec![0usize; bins];
    let (lo, hi) = (grid[0], grid[bins]);
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v >= lo && v < hi {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let scale = 1.0 / (values.len() as f64 * width);
    let mut x = Vec::with_capacity(2 * bins);
    let mut density = Vec::with_capacity(2 * bins);
    let mut per_grid = Vec::with_capacity(grid.len());
    for (j, &count) in counts.iter().enumerate() {
        let d = count as f64 * scale;
        x.push(grid[j]);
        density.push(d);
        x.push(grid[j + 1]);
        density.push(d);
        per_grid.push(d);
    }
    per_grid.push(*per_grid.last().expect("at least one bin"));
    Histogram { x, density, per_grid }
}

fn curves_csv(var: &marconflow::audit::VariableAudit, hist: &Histogram) -> String {
    let mut out = String::from("y,direct_pdf,marginalized_pdf,sample_density\n");
    for (((g, d), m), h) in
        var.grid.iter().zip(&var.direct_pdf).zip(&var.marginalized_pdf).zip(&hist.per_grid)
    {
        out.push_str(&format!("{g},{d},{m},{h}\n"));
    }
    out
}
