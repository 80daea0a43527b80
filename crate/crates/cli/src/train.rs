//! `train`: fits a model per the run configuration and writes checkpoints.
//!
//! Outputs, all inside the run's output directory:
//!
//! - `resolved_config.toml` — the configuration after flag overrides,
//!   written before training starts so even an aborted run documents
//!   itself;
//! - `checkpoint.mcfw` — the best-validation parameters (what `eval`,
//!   `sample`, and `audit` consume);
//! - `last.mcfw` — the final parameters plus optimizer moments and
//!   schedule counters, the exact position `--resume` continues from;
//! - `train_report.json` — per-epoch losses and the best-epoch summary.
//!
//! The checkpoints contain no wall-clock fields, so re-running the same
//! configuration reproduces them byte for byte; timings live only in the
//! report.

use std::path::{Path, PathBuf};

use marconflow::model::MosesModel;
use marconflow::train::{load_checkpoint, save_checkpoint, train_from, TrainState};
use marconflow::{Error, Result};

use crate::config::RunConfig;
use crate::data::{load_nonempty, Normalizer, NORMALIZER_KEY};

/// File name of the best-validation checkpoint inside the output directory.
pub const CHECKPOINT: &str = "checkpoint.mcfw";
/// File name of the resume checkpoint inside the output directory.
pub const LAST: &str = "last.mcfw";

/// Runs one training session, optionally continuing from a `last.mcfw`.
pub fn run(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let train_path = cfg.dataset.train.as_deref().ok_or_else(|| {
        Error::Validation("config has no dataset.train path; train needs one".into())
    })?;
    let val_path = cfg.dataset.validation.as_deref().ok_or_else(|| {
        Error::Validation("config has no dataset.validation path; train needs one".into())
    })?;
    let mut train_set = load_nonempty(train_path)?;
    let mut val_set = load_nonempty(val_path)?;

    // On resume the checkpoint's transform wins over a refit: the session
    // must see the data exactly as the original one did.
    let (state, normalizer) = match resume {
        None => {
            let normalizer = Normalizer::fit(
                &train_set,
                cfg.model.channels,
                cfg.dataset.standardize,
                cfg.dataset.normalize_time,
            )?;
            let model = MosesModel::new(cfg.model, cfg.seed)?;
            (TrainState::fresh(model), normalizer)
        }
        Some(path) => {
            let (model, adam, manifest) = load_checkpoint(path)?;
            if *model.config() != cfg.model {
                return Err(Error::Validation(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            let adam = adam.ok_or_else(|| {
                Error::Validation(format!(
                    "checkpoint {} has no optimizer state; resume from {LAST}, not {CHECKPOINT}",
                    path.display()
                ))
            })?;
            let counter = |key: &str| -> Result<usize> {
                manifest
                    .get(key)
                    .and_then(|v| v.as_u64())
                    .map(|v| v as usize)
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "checkpoint {} lacks the {key} counter",
                            path.display()
                        ))
                    })
            };
            let state = TrainState {
                model,
                adam,
                next_epoch: counter("next_epoch")?,
                steps: counter("steps")?,
            };
            let normalizer = Normalizer::from_manifest(&manifest)?;
            log::info!(
                "resuming from {} at epoch {}, step {}",
                path.display(),
                state.next_epoch,
                state.steps
            );
            (state, normalizer)
        }
    };
    normalizer.apply(&mut train_set);
    normalizer.apply(&mut val_set);

    cfg.write_resolved()?;
    log::info!(
        "training {} on {} instances ({} validation)",
        cfg.model_name(),
        train_set.len(),
        val_set.len()
    );
    let (best, report, last) = train_from(state, &train_set, &val_set, &cfg.train)?;

    let dataset = cfg.dataset_name(None);
    let norm_json = normalizer.to_manifest()?;
    let ckpt_path = cfg.out.join(CHECKPOINT);
    save_checkpoint(
        &ckpt_path,
        &best,
        None,
        serde_json::json!({
            NORMALIZER_KEY: norm_json,
            "dataset": dataset,
            "steps": report.steps,
        }),
    )?;
    save_checkpoint(
        &cfg.out.join(LAST),
        &last.model,
        Some(&last.adam),
        serde_json::json!({
            NORMALIZER_KEY: norm_json,
            "dataset": dataset,
            "steps": last.steps,
            "next_epoch": last.next_epoch,
        }),
    )?;
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("serialize train report: {e}")))?;
    std::fs::write(cfg.out.join("train_report.json"), report_json)?;

    match (report.best_epoch, report.best_val_njnll) {
        (Some(epoch), Some(val)) => {
            log::info!("best epoch {epoch}: validation njNLL {val:.6}; wrote {}", ckpt_path.display())
        }
        _ => log::info!("no epoch completed; wrote initial parameters to {}", ckpt_path.display()),
    }
    Ok(ckpt_path)
}
