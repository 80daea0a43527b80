//! `eval`: computes metrics for a checkpoint on a held-out file.
//!
//! Instances fan out across a worker pool. Every instance draws from its
//! own counter-derived RNG stream, so results are identical whatever the
//! thread count, and the reduction collects in instance order. (The
//! library's single-threaded metric drivers walk one shared stream
//! instead; both are deterministic, they are just different draws.)
//!
//! Outputs: `metrics.csv` (one row per metric, the format of
//! [`marconflow::metrics::CSV_HEADER`]) and `metrics.json` with the full
//! per-instance breakdowns. The requested `mi` metric always brings its
//! sampling noise floor along as an extra `mi_noise_floor` row: the
//! estimate is meaningless without the scale sampling noise alone reaches.

use std::path::Path;

use marconflow::metrics::{self, MetricReport, CSV_HEADER};
use marconflow::model::MosesModel;
use marconflow::series::TimeSeriesInstance;
use marconflow::train::load_checkpoint;
use marconflow::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::config::{model_label, RunConfig};
use crate::data::{load_nonempty, Normalizer};

const KNOWN_METRICS: &[&str] = &["njnll", "mnll", "crps", "energy_score", "mi"];

/// Runs the requested metrics and writes the report files.
pub fn run(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    for name in &cfg.eval.metrics {
        if !KNOWN_METRICS.contains(&name.as_str()) {
            return Err(Error::Validation(format!(
                "unknown metric {name:?}; expected one of {}",
                KNOWN_METRICS.join(", ")
            )));
        }
    }
    let data_path = data
        .or(cfg.dataset.test.as_deref())
        .ok_or_else(|| Error::Validation("no data file: pass --data or set dataset.test".into()))?;
    let (model, _, manifest) = load_checkpoint(checkpoint)?;
    let normalizer = Normalizer::from_manifest(&manifest)?;
    let mut instances = load_nonempty(data_path)?;
    normalizer.apply(&mut instances);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Validation(format!("worker pool: {e}")))?;
    log::info!(
        "evaluating {} on {} instances with {} workers",
        model_label(model.config()),
        instances.len(),
        pool.current_num_threads()
    );

    let mut reports = Vec::new();
    for (metric_idx, name) in cfg.eval.metrics.iter().enumerate() {
        let computed = pool.install(|| {
            compute(name, metric_idx as u64, &model, &instances, cfg.eval.n_samples, cfg.seed)
        })?;
        reports.extend(computed);
    }

    cfg.write_resolved()?;
    let dataset = cfg.dataset_name(Some(data_path));
    let model_name = model_label(model.config());
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for report in &reports {
        let row = report.csv_row(&dataset, &model_name);
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(cfg.out.join("metrics.csv"), csv)?;
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::Validation(format!("serialize metric reports: {e}")))?;
    std::fs::write(cfg.out.join("metrics.json"), json)?;
    Ok(())
}

/// A fresh RNG stream unique to (metric, instance): whichever worker picks
/// the instance up gets the same numbers.
fn stream(seed: u64, metric: u64, instance: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((metric << 32) | instance as u64);
    rng
}

fn compute(
    name: &str,
    metric: u64,
    model: &MosesModel,
    instances: &[TimeSeriesInstance],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    match name {
        "njnll" => {
            let per: Vec<f64> = instances
                .par_iter()
                .map(|inst| Ok(-model.log_density(inst)?.log_joint / inst.k() as f64))
                .collect::<Result<_>>()?;
            Ok(vec![MetricReport::from_per_instance("njnll", per, None)?])
        }
        "mnll" => {
            let sums: Vec<(f64, usize)> = instances
                .par_iter()
                .map(|inst| {
                    let marginals =
                        model.predict_univariate_marginals(&inst.context, &inst.query)?;
                    let mut total = 0.0;
                    for (marginal, &y) in marginals.iter().zip(&inst.answer) {
                        total += -marginal.log_pdf(y)?;
                    }
                    Ok((total, inst.k()))
                })
                .collect::<Result<_>>()?;
            let per: Vec<f64> = sums.iter().map(|(s, k)| s / *k as f64).collect();
            let mut report = MetricReport::from_per_instance("mnll", per, None)?;
            // Headline averages over targets, not instances.
            let targets: usize = sums.iter().map(|(_, k)| k).sum();
            report.value = sums.iter().map(|(s, _)| s).sum::<f64>() / targets as f64;
            Ok(vec![report])
        }
        "crps" => {
            let per: Vec<f64> = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let mut rng = stream(seed, metric, i);
                    let draws =
                        model.sample_many(&inst.context, &inst.query, n_samples, &mut rng)?;
                    let mut total = 0.0;
                    for k in 0..inst.k() {
                        let coord: Vec<f64> = draws.iter().map(|s| s[k]).collect();
                        total += metrics::crps_sample(&coord, inst.answer[k])?;
                    }
                    Ok(total / inst.k() as f64)
                })
                .collect::<Result<_>>()?;
            Ok(vec![MetricReport::from_per_instance("crps", per, Some(n_samples))?])
        }
        "energy_score" => {
            let per: Vec<f64> = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let mut rng = stream(seed, metric, i);
                    let draws =
                        model.sample_many(&inst.context, &inst.query, n_samples, &mut rng)?;
                    metrics::energy_score(&draws, &inst.answer, 1.0)
                })
                .collect::<Result<_>>()?;
            Ok(vec![MetricReport::from_per_instance("energy_score", per, Some(n_samples))?])
        }
        "mi" => {
            let pairs: Vec<(f64, f64)> = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let mut rng = stream(seed, metric, i);
                    let res = metrics::marginal_inconsistency(
                        model,
                        &inst.context,
                        &inst.query,
                        n_samples,
                        &mut rng,
                    )?;
                    Ok((res.mi, res.noise_floor))
                })
                .collect::<Result<_>>()?;
            let mi: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let floor: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            Ok(vec![
                MetricReport::from_per_instance("mi", mi, Some(n_samples))?,
                MetricReport::from_per_instance("mi_noise_floor", floor, Some(n_samples))?,
            ])
        }
        other => Err(Error::Validation(format!("unknown metric {other:?}"))),
    }
}
