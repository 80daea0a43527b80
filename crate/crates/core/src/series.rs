//! Irregular time-series instances, file ingestion, toy generators, splits,
//! and padded batching.
//!
//! An instance is a triplet-encoded irregular series: a `context` of observed
//! `(t, c, v)` points, a `query` of `(t, c)` positions to forecast, and the
//! ground-truth `answer` values at those positions. Instances move between
//! processes as JSONL (one instance per line) and are packed into padded,
//! masked [`Batch`]es for the model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gradcore::Tensor;
use crate::{Error, Result};

/// One observed point of the context: value `v` of channel `c` at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextPoint {
    pub t: f64,
    /// 1-based channel id.
    pub c: usize,
    pub v: f64,
}

/// One query position: channel `c` at time `t`, value to be predicted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint {
    pub t: f64,
    /// 1-based channel id.
    pub c: usize,
}

/// A single forecasting instance.
///
/// Invariants (checked by [`TimeSeriesInstance::validate`]):
/// - at least one query, and exactly one answer per query;
/// - channel ids are ≥ 1;
/// - all times and values are finite;
/// - every query time is strictly later than every context time.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesInstance {
    pub context: Vec<ContextPoint>,
    pub query: Vec<QueryPoint>,
    pub answer: Vec<f64>,
}

/// Wire format of one JSONL line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    context: Vec<(f64, u32, f64)>,
    query: Vec<(f64, u32)>,
    answer: Vec<f64>,
}

impl From<&TimeSeriesInstance> for RawInstance {
    fn from(inst: &TimeSeriesInstance) -> Self {
        RawInstance {
            context: inst.context.iter().map(|p| (p.t, p.c as u32, p.v)).collect(),
            query: inst.query.iter().map(|q| (q.t, q.c as u32)).collect(),
            answer: inst.answer.clone(),
        }
    }
}

impl From<RawInstance> for TimeSeriesInstance {
    fn from(raw: RawInstance) -> Self {
        TimeSeriesInstance {
            context: raw
                .context
                .into_iter()
                .map(|(t, c, v)| ContextPoint { t, c: c as usize, v })
                .collect(),
            query: raw.query.into_iter().map(|(t, c)| QueryPoint { t, c: c as usize }).collect(),
            answer: raw.answer,
        }
    }
}

impl TimeSeriesInstance {
    /// Number of context points.
    pub fn n(&self) -> usize {
        self.context.len()
    }

    /// Number of query points.
    pub fn k(&self) -> usize {
        self.query.len()
    }

    /// Largest channel id used by this instance (0 if it has no points).
    pub fn max_channel(&self) -> usize {
        let ctx = self.context.iter().map(|p| p.c).max().unwrap_or(0);
        let qry = self.query.iter().map(|q| q.c).max().unwrap_or(0);
        ctx.max(qry)
    }

    /// Checks the structural invariants listed on the type.
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::Validation("instance has an empty query".into()));
        }
        if self.answer.len() != self.query.len() {
            return Err(Error::Validation(format!(
                "answer length {} does not match query length {}",
                self.answer.len(),
                self.query.len()
            )));
        }
        for p in &self.context {
            if p.c == 0 {
                return Err(Error::Validation("context channel id 0 (ids are 1-based)".into()));
            }
            if !p.t.is_finite() || !p.v.is_finite() {
                return Err(Error::Validation("non-finite context entry".into()));
            }
        }
        for q in &self.query {
            if q.c == 0 {
                return Err(Error::Validation("query channel id 0 (ids are 1-based)".into()));
            }
            if !q.t.is_finite() {
                return Err(Error::Validation("non-finite query time".into()));
            }
        }
        if self.answer.iter().any(|y| !y.is_finite()) {
            return Err(Error::Validation("non-finite answer value".into()));
        }
        if let Some(ctx_max) = self.context.iter().map(|p| p.t).fold(None, |m: Option<f64>, t| {
            Some(m.map_or(t, |m| m.max(t)))
        }) {
            let qry_min = self.query.iter().map(|q| q.t).fold(f64::INFINITY, f64::min);
            if qry_min <= ctx_max {
                return Err(Error::Validation(format!(
                    "query time {qry_min} does not lie after the last context time {ctx_max}"
                )));
            }
        }
        Ok(())
    }
}

/// Reads instances from a JSONL file, one instance per line.
///
/// Blank lines are skipped. Malformed or invalid lines fail with the
/// file path and 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TimeSeriesInstance>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!("{}:{}: malformed instance: {e}", path.display(), idx + 1))
        })?;
        let inst = TimeSeriesInstance::from(raw);
        inst.validate().map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Writes instances to a JSONL file in the format read by [`load_jsonl`].
pub fn save_jsonl(path: impl AsRef<Path>, instances: &[TimeSeriesInstance]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for inst in instances {
        let raw = RawInstance::from(inst);
        let line = serde_json::to_string(&raw)
            .map_err(|e| Error::Validation(format!("serialize instance: {e}")))?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes instances as flat CSV rows `instance_id,role,t,c,v` for plotting.
///
/// Context points get role `ctx`; query points get role `qry` with the
/// answer value in the `v` column.
pub fn save_csv(path: impl AsRef<Path>, instances: &[TimeSeriesInstance]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    writeln!(writer, "instance_id,role,t,c,v")?;
    for (id, inst) in instances.iter().enumerate() {
        for p in &inst.context {
            writeln!(writer, "{id},ctx,{},{},{}", p.t, p.c, p.v)?;
        }
        for (q, y) in inst.query.iter().zip(&inst.answer) {
            writeln!(writer, "{id},qry,{},{},{}", q.t, q.c, y)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Number of channels used by the toy generators.
pub const TOY_CHANNELS: usize = 2;

/// Fixed query positions under which toy draws are packaged: the two
/// coordinates of a draw become the answers of a two-variable query on
/// channels 1 and 2.
pub fn toy_query() -> Vec<QueryPoint> {
    vec![QueryPoint { t: 0.5, c: 1 }, QueryPoint { t: 1.0, c: 2 }]
}

fn toy_instance(y: [f64; 2]) -> TimeSeriesInstance {
    TimeSeriesInstance { context: Vec::new(), query: toy_query(), answer: y.to_vec() }
}

/// Componentwise signed square, the transform that produces a blast draw
/// from its underlying Gaussian coordinate.
fn signed_square(z: f64) -> f64 {
    z.signum() * z * z
}

/// Generates `n` draws from the blast distribution, packaged as
/// empty-context, two-variable instances.
///
/// A draw is `y = sign(z) ∘ z ∘ z` with `z ~ N(0, [[1,1],[1,2]])`. Both
/// coordinates are monotone transforms of correlated Gaussians, so the
/// squaring stretches the tails while keeping the dependence structure.
pub fn generate_blast(n: usize, seed: u64) -> Result<Vec<TimeSeriesInstance>> {
    if n == 0 {
        return Err(Error::Contract("generate_blast requires n >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        // Cholesky factor of [[1,1],[1,2]] is [[1,0],[1,1]].
        let z1 = e1;
        let z2 = e1 + e2;
        out.push(toy_instance([signed_square(z1), signed_square(z2)]));
    }
    Ok(out)
}

/// Generates `n` draws from the circle distribution, packaged as
/// empty-context, two-variable instances.
///
/// A draw is `y = z/‖z‖₂ + 0.05·η` with `z, η ~ N(0, I₂)`: points on the
/// unit circle blurred by isotropic noise. Degenerate `‖z‖₂ < 1e-12` draws
/// are resampled.
pub fn generate_circle(n: usize, seed: u64) -> Result<Vec<TimeSeriesInstance>> {
    if n == 0 {
        return Err(Error::Contract("generate_circle requires n >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (z1, z2) = loop {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            if z1.hypot(z2) >= 1e-12 {
                break (z1, z2);
            }
        };
        let norm = z1.hypot(z2);
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        out.push(toy_instance([z1 / norm + 0.05 * n1, z2 / norm + 0.05 * n2]));
    }
    Ok(out)
}

/// Index lists of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `instances` into train/validation/test index lists.
///
/// Indices are shuffled deterministically by `seed`, then cut so that the
/// train and validation parts get `floor(n·ratio)` instances each and the
/// test part gets the remainder. Ratios must be non-negative and sum to 1.
pub fn split(
    instances: &[TimeSeriesInstance],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Contract(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let sum = r_train + r_val + r_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("split ratios must sum to 1, got {sum}")));
    }
    let n = instances.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * r_train).floor() as usize;
    let n_val = (n as f64 * r_val).floor() as usize;
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok(DatasetSplit { train: order, validation, test })
}

/// Clones the instances selected by an index list.
pub fn gather(instances: &[TimeSeriesInstance], indices: &[usize]) -> Vec<TimeSeriesInstance> {
    indices.iter().map(|&i| instances[i].clone()).collect()
}

/// Min/max of the observation and query times of a reference (train) set,
/// used to min-max normalize times into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBounds {
    pub min: f64,
    pub max: f64,
}

impl TimeBounds {
    /// Computes bounds over all context and query times of `instances`.
    pub fn from_instances(instances: &[TimeSeriesInstance]) -> Result<TimeBounds> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for inst in instances {
            for p in &inst.context {
                min = min.min(p.t);
                max = max.max(p.t);
            }
            for q in &inst.query {
                min = min.min(q.t);
                max = max.max(q.t);
            }
        }
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::Validation("time bounds need at least one timestamped point".into()));
        }
        if max - min < 1e-12 {
            return Err(Error::Validation(format!(
                "degenerate time range [{min}, {max}] cannot be normalized"
            )));
        }
        Ok(TimeBounds { min, max })
    }

    /// Maps a raw time into the normalized scale (train range maps to [0,1];
    /// out-of-range times extrapolate linearly).
    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.min) / (self.max - self.min)
    }

    /// Applies [`TimeBounds::normalize`] to every time of every instance.
    pub fn normalize_instances(&self, instances: &mut [TimeSeriesInstance]) {
        for inst in instances {
            for p in &mut inst.context {
                p.t = self.normalize(p.t);
            }
            for q in &mut inst.query {
                q.t = self.normalize(q.t);
            }
        }
    }
}

/// Per-channel mean and standard deviation of a reference (train) set,
/// used to z-standardize values so every channel trains on a unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// `mean[c-1]` is the mean of channel `c`.
    pub mean: Vec<f64>,
    /// `std[c-1]` is the standard deviation of channel `c`; constant
    /// channels fall back to 1 so standardization stays invertible.
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Computes per-channel statistics over context values and answers.
    ///
    /// `channels` fixes the number of channels; instances may not use a
    /// larger channel id. Channels with no observations get mean 0, std 1.
    pub fn from_instances(instances: &[TimeSeriesInstance], channels: usize) -> Result<ChannelStats> {
        if channels == 0 {
            return Err(Error::Contract("channel count must be >= 1".into()));
        }
        let mut sum = vec![0.0; channels];
        let mut sum_sq = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        let mut tally = |c: usize, v: f64| -> Result<()> {
            if c == 0 || c > channels {
                return Err(Error::Validation(format!(
                    "channel id {c} outside the configured range 1..={channels}"
                )));
            }
            sum[c - 1] += v;
            sum_sq[c - 1] += v * v;
            count[c - 1] += 1;
            Ok(())
        };
        for inst in instances {
            for p in &inst.context {
                tally(p.c, p.v)?;
            }
            for (q, &y) in inst.query.iter().zip(&inst.answer) {
                tally(q.c, y)?;
            }
        }
        let mut mean = vec![0.0; channels];
        let mut std = vec![1.0; channels];
        for c in 0..channels {
            if count[c] == 0 {
                continue;
            }
            let m = sum[c] / count[c] as f64;
            let var = (sum_sq[c] / count[c] as f64 - m * m).max(0.0);
            mean[c] = m;
            if var.sqrt() > 1e-12 {
                std[c] = var.sqrt();
            }
        }
        Ok(ChannelStats { mean, std })
    }

    /// Number of channels the statistics cover.
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a raw value of channel `c` (1-based).
    pub fn standardize(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c - 1]) / self.std[c - 1]
    }

    /// Inverts [`ChannelStats::standardize`].
    pub fn destandardize(&self, c: usize, v: f64) -> f64 {
        v * self.std[c - 1] + self.mean[c - 1]
    }

    /// Standardizes every context value and answer of every instance.
    pub fn standardize_instances(&self, instances: &mut [TimeSeriesInstance]) {
        for inst in instances {
            for p in &mut inst.context {
                p.v = self.standardize(p.c, p.v);
            }
            let channels: Vec<usize> = inst.query.iter().map(|q| q.c).collect();
            for (y, c) in inst.answer.iter_mut().zip(channels) {
                *y = self.standardize(c, *y);
            }
        }
    }
}

/// A group of instances padded to common context/query lengths.
///
/// Padded slots hold zeros (channel id 0) and a 0 mask entry; real slots
/// have a 1 mask entry, so each mask row sums to the true length.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions of the batch rows in the source instance list.
    pub indices: Vec<usize>,
    /// True context lengths per row.
    pub n_len: Vec<usize>,
    /// True query lengths per row.
    pub k_len: Vec<usize>,
    /// Context times, `[B, N_max]`.
    pub ctx_t: Tensor,
    /// Context channel ids per row, padded with 0.
    pub ctx_c: Vec<Vec<usize>>,
    /// Context values, `[B, N_max]`.
    pub ctx_v: Tensor,
    /// Context mask, `[B, N_max]`, 1.0 for real slots.
    pub ctx_mask: Tensor,
    /// Query times, `[B, K_max]`.
    pub qry_t: Tensor,
    /// Query channel ids per row, padded with 0.
    pub qry_c: Vec<Vec<usize>>,
    /// Query mask, `[B, K_max]`, 1.0 for real slots.
    pub qry_mask: Tensor,
    /// Ground-truth values, `[B, K_max]`.
    pub answers: Tensor,
}

impl Batch {
    /// Number of instances in the batch.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// True if the batch holds no instances.
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Maximum (padded) context length.
    pub fn n_max(&self) -> usize {
        self.ctx_t.shape()[1]
    }

    /// Maximum (padded) query length.
    pub fn k_max(&self) -> usize {
        self.qry_t.shape()[1]
    }

    /// Reconstructs the unpadded instance stored in row `b`.
    pub fn instance(&self, b: usize) -> TimeSeriesInstance {
        let n = self.n_len[b];
        let k = self.k_len[b];
        let context = (0..n)
            .map(|i| ContextPoint {
                t: self.ctx_t.row_slice(b)[i],
                c: self.ctx_c[b][i],
                v: self.ctx_v.row_slice(b)[i],
            })
            .collect();
        let query = (0..k)
            .map(|j| QueryPoint { t: self.qry_t.row_slice(b)[j], c: self.qry_c[b][j] })
            .collect();
        let answer = self.answers.row_slice(b)[..k].to_vec();
        TimeSeriesInstance { context, query, answer }
    }

    fn pack(instances: &[TimeSeriesInstance], indices: Vec<usize>) -> Result<Batch> {
        let b = indices.len();
        let n_len: Vec<usize> = indices.iter().map(|&i| instances[i].n()).collect();
        let k_len: Vec<usize> = indices.iter().map(|&i| instances[i].k()).collect();
        let n_max = n_len.iter().copied().max().unwrap_or(0);
        let k_max = k_len.iter().copied().max().unwrap_or(0);
        let mut ctx_t = vec![0.0; b * n_max];
        let mut ctx_c = vec![vec![0usize; n_max]; b];
        let mut ctx_v = vec![0.0; b * n_max];
        let mut ctx_mask = vec![0.0; b * n_max];
        let mut qry_t = vec![0.0; b * k_max];
        let mut qry_c = vec![vec![0usize; k_max]; b];
        let mut qry_mask = vec![0.0; b * k_max];
        let mut answers = vec![0.0; b * k_max];
        for (row, &i) in indices.iter().enumerate() {
            let inst = &instances[i];
            for (j, p) in inst.context.iter().enumerate() {
                ctx_t[row * n_max + j] = p.t;
                ctx_c[row][j] = p.c;
                ctx_v[row * n_max + j] = p.v;
                ctx_mask[row * n_max + j] = 1.0;
            }
            for (j, q) in inst.query.iter().enumerate() {
                qry_t[row * k_max + j] = q.t;
                qry_c[row][j] = q.c;
                qry_mask[row * k_max + j] = 1.0;
                answers[row * k_max + j] = inst.answer[j];
            }
        }
        Ok(Batch {
            indices,
            n_len,
            k_len,
            ctx_t: Tensor::new(vec![b, n_max], ctx_t)?,
            ctx_c,
            ctx_v: Tensor::new(vec![b, n_max], ctx_v)?,
            ctx_mask: Tensor::new(vec![b, n_max], ctx_mask)?,
            qry_t: Tensor::new(vec![b, k_max], qry_t)?,
            qry_c,
            qry_mask: Tensor::new(vec![b, k_max], qry_mask)?,
            answers: Tensor::new(vec![b, k_max], answers)?,
        })
    }
}

/// Packs instances into padded batches of at most `batch_size` rows.
///
/// With `shuffle` the instance order is permuted deterministically by
/// `seed` before batching; otherwise batches follow the input order.
pub fn make_batches(
    instances: &[TimeSeriesInstance],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    if shuffle {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::pack(instances, chunk.to_vec()))
        .collect()
}
