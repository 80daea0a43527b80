//! Training loop: normalized joint negative log-likelihood with Adam and
//! validation-based early stopping.
//!
//! The objective is the njNLL — the average over instances of
//! `−log p̂(y | Q, X) / K`, so instances with many queried variables
//! don't dominate instances with few. One optimizer step per batch, a
//! fresh shuffle per epoch (seeded, so runs replay exactly), validation
//! after every epoch, and the best-validation parameter snapshot is what
//! training returns. Grid search wraps independent runs of the same loop.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::gradcore::{adam, checkpoint, NodeId, ParamStore, Tape, Tensor};
use crate::model::{joint_log_density_graph, MosesModel, ModelConfig};
use crate::series::{make_batches, TimeSeriesInstance};
use crate::{Error, Result};

/// Knobs of one training run.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam learning rate.
    pub lr: f64,
    /// Instances per optimizer step.
    pub batch_size: usize,
    /// Upper bound on epochs.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Optional cap on total optimizer steps (stops mid-epoch).
    pub max_steps: Option<usize>,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Seed for shuffling; epoch-specific streams are derived from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            max_steps: None,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the knobs are usable.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Contract("patience must be at least 1".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::Contract(format!("gradient clip must be positive, got {clip}")));
            }
        }
        Ok(())
    }
}

/// One epoch's summary.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    /// Epoch index, starting at 0.
    pub epoch: usize,
    /// Mean training njNLL over the epoch's steps.
    pub train_njnll: f64,
    /// Validation njNLL after the epoch.
    pub val_njnll: f64,
    /// Wall-clock seconds spent in the epoch (training + validation).
    pub seconds: f64,
}

/// Full history of one training run.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Per-epoch records in order.
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot the run returned, if any epoch completed.
    pub best_epoch: Option<usize>,
    /// That epoch's validation njNLL.
    pub best_val_njnll: Option<f64>,
    /// Total optimizer steps taken.
    pub steps: usize,
}

impl TrainReport {
    /// The loss trajectory without timings — what determinism tests and
    /// comparisons should look at, since wall-clock varies run to run.
    pub fn trajectory(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_njnll, e.val_njnll)).collect()
    }
}

/// njNLL of a set of instances under a model, evaluated without a
/// gradient tape.
pub fn njnll_value(model: &MosesModel, instances: &[TimeSeriesInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Contract("njNLL of an empty instance set".into()));
    }
    let mut total = 0.0;
    for instance in instances {
        let res = model.log_density(instance)?;
        total += -res.log_joint / instance.k() as f64;
    }
    Ok(total / instances.len() as f64)
}

/// Builds the njNLL of a batch of instances as a tape graph:
/// `(1/B) Σ_i −log p̂(y_i)/K_i`.
pub fn njnll_graph(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
    instances: &[TimeSeriesInstance],
) -> Result<NodeId> {
    if instances.is_empty() {
        return Err(Error::Contract("njNLL of an empty instance set".into()));
    }
    let mut acc: Option<NodeId> = None;
    for instance in instances {
        let log_joint = joint_log_density_graph(tape, ids, cfg, instance)?;
        let scaled = tape.scale(log_joint, -1.0 / instance.k() as f64)?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => tape.add(prev, scaled)?,
        });
    }
    tape.scale(acc.expect("nonempty instance set"), 1.0 / instances.len() as f64)
}

/// Derives an epoch-specific shuffle seed from the base seed
/// (SplitMix64-style mixing, so nearby epochs get unrelated streams).
fn epoch_seed(base: u64, epoch: usize) -> u64 {
    let mut x = base ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Scales all gradients so their global L2 norm is at most `clip`.
fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, clip: f64) {
    let norm_sq: f64 =
        grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let factor = clip / norm;
        for g in grads.values_mut() {
            let scaled: Vec<f64> = g.data().iter().map(|x| x * factor).collect();
            *g = Tensor::new(g.shape().to_vec(), scaled).expect("shape unchanged");
        }
    }
}

/// A run's exact position: the latest parameters (not the best-validation
/// snapshot), the optimizer moments aligned with them, and the schedule
/// counters. Feeding it back into [`train_from`] continues the run as if it
/// had never stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Parameters as of the last completed optimizer step.
    pub model: MosesModel,
    /// Adam moment accumulators and step count for those parameters.
    pub adam: adam::AdamState,
    /// Epoch index the next session runs first.
    pub next_epoch: usize,
    /// Optimizer steps taken so far; counts toward `max_steps`.
    pub steps: usize,
}

impl TrainState {
    /// A fresh run of `model`: epoch 0, zeroed moments.
    pub fn fresh(model: MosesModel) -> TrainState {
        TrainState { model, adam: adam::AdamState::new(), next_epoch: 0, steps: 0 }
    }
}

/// Runs the training loop and returns the best-validation model with the
/// full history. `max_epochs == 0` returns the input model untouched.
pub fn train(
    model: MosesModel,
    train_set: &[TimeSeriesInstance],
    val_set: &[TimeSeriesInstance],
    cfg: &TrainConfig,
) -> Result<(MosesModel, TrainReport)> {
    let (best, report, _) = train_from(TrainState::fresh(model), train_set, val_set, cfg)?;
    Ok((best, report))
}

/// Continues a run from `state` until `cfg.max_epochs` (an absolute epoch
/// count) or the step cap. The batch schedule depends only on
/// `(cfg.seed, epoch)` and the optimizer position travels in the state, so
/// splitting a run across sessions reproduces the uninterrupted run's
/// losses bit-exactly, epoch by epoch. Two caveats: the early-stopping
/// window restarts with each session, and the returned report covers only
/// the epochs this session ran (`report.steps` still counts from the
/// beginning of the run).
pub fn train_from(
    state: TrainState,
    train_set: &[TimeSeriesInstance],
    val_set: &[TimeSeriesInstance],
    cfg: &TrainConfig,
) -> Result<(MosesModel, TrainReport, TrainState)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be nonempty".into()));
    }
    let model_cfg = *state.model.config();
    let mut model = state.model;
    let mut adam_state = state.adam;
    let adam_cfg = adam::AdamConfig { lr: cfg.lr, ..adam::AdamConfig::default() };
    let mut report = TrainReport { steps: state.steps, ..TrainReport::default() };
    let mut next_epoch = state.next_epoch;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale_epochs = 0usize;

    'epochs: for epoch in state.next_epoch..cfg.max_epochs {
        let started = Instant::now();
        let batches =
            make_batches(train_set, cfg.batch_size, epoch_seed(cfg.seed, epoch), true)?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut capped = false;
        for batch in &batches {
            if cfg.max_steps.is_some_and(|cap| report.steps >= cap) {
                capped = true;
                break;
            }
            let instances: Vec<TimeSeriesInstance> =
                (0..batch.len()).map(|b| batch.instance(b)).collect();
            let step = report.steps + 1;
            let wrap = |e: Error| Error::Numerical(format!("step {step}: {e}"));
            let mut tape = Tape::new();
            let ids = tape.register(model.params()).map_err(wrap)?;
            let loss = njnll_graph(&mut tape, &ids, &model_cfg, &instances).map_err(wrap)?;
            let loss_value = tape.value(loss).item().map_err(wrap)?;
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!("step {step}: non-finite loss {loss_value}")));
            }
            let mut grads = tape.backward(loss).map_err(wrap)?;
            if let Some(clip) = cfg.grad_clip {
                clip_gradients(&mut grads, clip);
            }
            adam_state.step(model.params_mut(), &grads, &adam_cfg).map_err(wrap)?;
            report.steps += 1;
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            // Step cap hit before this epoch did any work.
            break 'epochs;
        }
        let train_njnll = loss_sum / seen as f64;
        let val_njnll = njnll_value(&model, val_set)?;
        let seconds = started.elapsed().as_secs_f64();
        println!(
            "epoch {epoch}: train njNLL {train_njnll:.6}, val njNLL {val_njnll:.6} ({seconds:.2}s)"
        );
        report.epochs.push(EpochRecord { epoch, train_njnll, val_njnll, seconds });
        next_epoch = epoch + 1;

        let improved = best.as_ref().map_or(true, |(_, best_val, _)| val_njnll < *best_val);
        if improved {
            best = Some((epoch, val_njnll, model.params().clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break 'epochs;
            }
        }
        if capped {
            break 'epochs;
        }
    }

    let state = TrainState {
        model: model.clone(),
        adam: adam_state,
        next_epoch,
        steps: report.steps,
    };
    if let Some((epoch, val, params)) = best {
        report.best_epoch = Some(epoch);
        report.best_val_njnll = Some(val);
        let model = MosesModel::from_parts(model_cfg, params)?;
        Ok((model, report, state))
    } else {
        Ok((model, report, state))
    }
}

/// Hyperparameter grid: every combination of the listed values is tried.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    /// Candidate mixture sizes `D`.
    pub components: Vec<usize>,
    /// Candidate head counts `H`.
    pub heads: Vec<usize>,
    /// Candidate code widths `M`.
    pub latent: Vec<usize>,
    /// Candidate positional-embedding widths `F`.
    pub pos_dim: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            components: vec![1, 2, 5, 7, 10],
            heads: vec![1, 2, 4],
            latent: vec![16, 32, 64, 128],
            pos_dim: vec![16, 32, 64, 128],
        }
    }
}

/// One grid cell's outcome.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridRecord {
    /// The configuration trained in this cell.
    pub config: ModelConfig,
    /// Its best validation njNLL under the budget.
    pub val_njnll: f64,
}

fn config_seed(base: u64, cfg: &ModelConfig) -> u64 {
    // Distinct deterministic seed per configuration, independent of grid
    // order, so identical cells replay identically.
    let mut x = base;
    for v in [cfg.components, cfg.heads, cfg.latent, cfg.pos_dim] {
        x = epoch_seed(x ^ v as u64, v);
    }
    x
}

/// Trains every grid combination with the same budget and returns the
/// configuration with the lowest validation njNLL, plus all outcomes.
/// Combinations are visited in lexicographic order `(D, H, M, F)` and a
/// tie keeps the earlier (lexicographically smaller) one. Each cell's run
/// is independent of the others — callers may distribute them.
pub fn grid_select(
    base: &ModelConfig,
    grid: &GridSpec,
    train_set: &[TimeSeriesInstance],
    val_set: &[TimeSeriesInstance],
    budget: &TrainConfig,
) -> Result<(ModelConfig, Vec<GridRecord>)> {
    if grid.components.is_empty()
        || grid.heads.is_empty()
        || grid.latent.is_empty()
        || grid.pos_dim.is_empty()
    {
        return Err(Error::Contract("hyperparameter grid is empty".into()));
    }
    let mut records = Vec::new();
    let mut best: Option<(f64, ModelConfig)> = None;
    for &d in &grid.components {
        for &h in &grid.heads {
            for &m in &grid.latent {
                for &f in &grid.pos_dim {
                    let cfg = ModelConfig {
                        components: d,
                        heads: h,
                        latent: m,
                        pos_dim: f,
                        ..*base
                    };
                    cfg.validate()?;
                    let seed = config_seed(budget.seed, &cfg);
                    let model = MosesModel::new(cfg, seed)?;
                    let run_cfg = TrainConfig { seed, ..*budget };
                    let (trained, report) = train(model, train_set, val_set, &run_cfg)?;
                    let val_njnll = match report.best_val_njnll {
                        Some(v) => v,
                        // Zero-epoch budget: score the untrained model.
                        None => njnll_value(&trained, val_set)?,
                    };
                    records.push(GridRecord { config: cfg, val_njnll });
                    if best.as_ref().map_or(true, |(v, _)| val_njnll < *v) {
                        best = Some((val_njnll, cfg));
                    }
                }
            }
        }
    }
    let (_, cfg) = best.expect("nonempty grid");
    Ok((cfg, records))
}

const ADAM_FIRST_PREFIX: &str = "adam.first.";
const ADAM_SECOND_PREFIX: &str = "adam.second.";

/// Writes a checkpoint holding the model (configuration + parameters) and
/// optionally the optimizer moments, so training can resume exactly.
/// `extra` is merged into the manifest for caller bookkeeping.
pub fn save_checkpoint(
    path: &std::path::Path,
    model: &MosesModel,
    adam_state: Option<&adam::AdamState>,
    extra: serde_json::Value,
) -> Result<()> {
    let mut manifest = serde_json::json!({
        "model": model.config(),
    });
    let mut store = model.params().clone();
    if let Some(state) = adam_state {
        manifest["adam_step"] = serde_json::json!(state.step);
        for (name, tensor) in &state.first {
            store.insert(&format!("{ADAM_FIRST_PREFIX}{name}"), tensor.clone())?;
        }
        for (name, tensor) in &state.second {
            store.insert(&format!("{ADAM_SECOND_PREFIX}{name}"), tensor.clone())?;
        }
    }
    if let serde_json::Value::Object(extra_map) = extra {
        let obj = manifest.as_object_mut().expect("manifest is an object");
        for (k, v) in extra_map {
            obj.insert(k, v);
        }
    }
    checkpoint::save(path, &manifest, &store)
}

/// Reads a checkpoint back into a model, the optimizer state (when the
/// checkpoint carried one), and the manifest.
pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(MosesModel, Option<adam::AdamState>, serde_json::Value)> {
    let (manifest, store) = checkpoint::load(path)?;
    let model_cfg: ModelConfig = serde_json::from_value(
        manifest
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Validation("checkpoint manifest lacks a model entry".into()))?,
    )
    .map_err(|e| Error::Validation(format!("checkpoint model entry: {e}")))?;

    let mut params = ParamStore::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for (name, tensor) in store.iter() {
        if let Some(stripped) = name.strip_prefix(ADAM_FIRST_PREFIX) {
            first.insert(stripped.to_string(), tensor.clone());
        } else if let Some(stripped) = name.strip_prefix(ADAM_SECOND_PREFIX) {
            second.insert(stripped.to_string(), tensor.clone());
        } else {
            params.insert(name, tensor.clone())?;
        }
    }
    let model = MosesModel::from_parts(model_cfg, params)?;
    let adam_state = match manifest.get("adam_step") {
        Some(step) => {
            let step = step
                .as_u64()
                .ok_or_else(|| Error::Validation("adam_step is not an integer".into()))?;
            Some(adam::AdamState { step, first, second })
        }
        None => None,
    };
    Ok((model, adam_state, manifest))
}
