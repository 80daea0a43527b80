//! Attention encoder: observations → per-query, per-component codes.
//!
//! The encoder turns an irregularly sampled context `X = {(t, c, v)}` and
//! a query set `Q = {(t, c)}` into everything the decoder heads consume:
//!
//! * `h_obs ∈ ℝ^{N×M}` — context rows encoded by one self-attention block;
//! * `h_query ∈ ℝ^{K×D·M}` — query rows encoded by cross-attention against
//!   `h_obs`, later split into `D` component codes of width `M` per query;
//! * `mix_logits ∈ ℝ^{D×1}` — cross-attention of learned component queries
//!   `β ∈ ℝ^{D×M}` against `h_obs`, reduced to one logit per component.
//!   Softmax of these gives mixture weights that depend only on the
//!   context, never on the queries.
//!
//! Each query row is processed independently of every other query row
//! (row-wise attention, row-wise projections), which is what makes
//! restricting a model to a sub-query equivalent to selecting rows of the
//! full encoding — the structural property the rest of the crate builds
//! its marginalization guarantees on.
//!
//! Everything is built as a tape graph; callers that only need numbers
//! run the graph on a scratch tape and read the forward values, so both
//! training and sampling share one implementation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::gradcore::{NodeId, ParamStore, Tape, Tensor};
use crate::{Error, Result};

/// Architecture of the encoder: component count `D`, code width `M`,
/// positional-embedding width `F`, channel count `C`, attention heads `H`,
/// and whether a learned null token stands in for an empty context.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Mixture components `D`.
    pub components: usize,
    /// Code width `M` per component and query.
    pub latent: usize,
    /// Positional-embedding dimension `F` (first component affine, rest
    /// sinusoidal).
    pub pos_dim: usize,
    /// Number of channels `C`; channel ids are 1-based in `[1, C]`.
    pub channels: usize,
    /// Attention heads `H`; must divide `M`.
    pub heads: usize,
    /// Substitute a learned token when the context is empty.
    pub null_context: bool,
    /// Learn context-dependent mixture logits; when false the mixing
    /// head has no parameters and the logits are constant zero (uniform
    /// weights).
    pub learned_weights: bool,
}

impl EncoderConfig {
    /// Checks dimensional feasibility.
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.latent == 0 || self.pos_dim == 0 || self.channels == 0 {
            return Err(Error::Contract(format!(
                "encoder dimensions must be positive: D={}, M={}, F={}, C={}",
                self.components, self.latent, self.pos_dim, self.channels
            )));
        }
        if self.heads == 0 || self.latent % self.heads != 0 {
            return Err(Error::Contract(format!(
                "head count {} must divide the code width {}",
                self.heads, self.latent
            )));
        }
        Ok(())
    }

    /// Context token width `F + C + 1`.
    pub fn context_token_width(&self) -> usize {
        self.pos_dim + self.channels + 1
    }

    /// Query token width `F + C`.
    pub fn query_token_width(&self) -> usize {
        self.pos_dim + self.channels
    }
}

/// Node ids of one attention block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MhaIds {
    /// Query projection, `[q_width, out]`.
    pub wq: NodeId,
    /// Key projection, `[kv_width, out]`.
    pub wk: NodeId,
    /// Value projection, `[kv_width, out]`.
    pub wv: NodeId,
    /// Output projection, `[out, out]`.
    pub wo: NodeId,
    /// Skip projection applied to the raw attention queries, `[q_width, out]`.
    pub wr: NodeId,
}

fn node(ids: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not registered")))
}

/// Looks up one attention block's five projection matrices by prefix.
pub fn mha_ids(ids: &BTreeMap<String, NodeId>, prefix: &str) -> Result<MhaIds> {
    Ok(MhaIds {
        wq: node(ids, &format!("{prefix}.wq"))?,
        wk: node(ids, &format!("{prefix}.wk"))?,
        wv: node(ids, &format!("{prefix}.wv"))?,
        wo: node(ids, &format!("{prefix}.wo"))?,
        wr: node(ids, &format!("{prefix}.wr"))?,
    })
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data: Vec<f64> =
        (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data length")
}

fn init_mha(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    q_width: usize,
    kv_width: usize,
    out: usize,
) -> Result<()> {
    // Scaled Gaussian init: variance 1/fan_in keeps pre-softmax scores and
    // projected outputs O(1) at depth one.
    let qs = 1.0 / (q_width as f64).sqrt();
    let ks = 1.0 / (kv_width as f64).sqrt();
    let os = 1.0 / (out as f64).sqrt();
    store.insert(&format!("{prefix}.wq"), normal_matrix(rng, q_width, out, qs))?;
    store.insert(&format!("{prefix}.wk"), normal_matrix(rng, kv_width, out, ks))?;
    store.insert(&format!("{prefix}.wv"), normal_matrix(rng, kv_width, out, ks))?;
    store.insert(&format!("{prefix}.wo"), normal_matrix(rng, out, out, os))?;
    store.insert(&format!("{prefix}.wr"), normal_matrix(rng, q_width, out, qs))?;
    Ok(())
}

/// Inserts all encoder parameters into `store` with their documented
/// initialization: attention matrices ~ N(0, 1/fan_in); positional
/// frequencies log-spaced over [0.1, 100] with zero phases; `β`, the
/// logit reduction, and the null token ~ N(0, 1/M).
pub fn init_encoder_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let m = cfg.latent;
    let d = cfg.components;
    let f = cfg.pos_dim;

    // Log-spaced frequencies cover time scales from fractions of the
    // normalized window up to fast oscillations.
    let a: Vec<f64> = if f == 1 {
        vec![1.0]
    } else {
        (0..f).map(|i| 10f64.powf(-1.0 + 3.0 * i as f64 / (f - 1) as f64)).collect()
    };
    store.insert("enc.pos.a", Tensor::row(&a))?;
    store.insert("enc.pos.b", Tensor::zeros(&[1, f]))?;

    init_mha(store, rng, "enc.obs", cfg.context_token_width(), cfg.context_token_width(), m)?;
    init_mha(store, rng, "enc.qry", cfg.query_token_width(), m, d * m)?;

    let hs = 1.0 / (m as f64).sqrt();
    if cfg.learned_weights {
        init_mha(store, rng, "enc.mix", m, m, m)?;
        store.insert("enc.beta", normal_matrix(rng, d, m, hs))?;
        store.insert("enc.mix.reduce", normal_matrix(rng, m, 1, hs))?;
    }
    if cfg.null_context {
        store.insert("enc.null", normal_matrix(rng, 1, m, hs))?;
    }
    Ok(())
}

/// Positional embedding of the times in `t` as a `[len(t), F]` node:
/// column 1 is `a₁t + b₁`, columns `f > 1` are `sin(a_f t + b_f)`.
pub fn posembed_graph(tape: &mut Tape, a: NodeId, b: NodeId, t: &[f64]) -> Result<NodeId> {
    if t.is_empty() {
        return Err(Error::Contract("positional embedding of an empty time list".into()));
    }
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite time in positional embedding".into()));
    }
    let n = t.len();
    let f = crate::gradcore::tensor::dims2(tape.value(a))?[1];
    let t_col = tape.constant(Tensor::new(vec![n, 1], t.to_vec())?)?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0))?;
    let ta = tape.matmul(t_col, a)?;
    let phases = tape.matmul(ones, b)?;
    let arg = tape.add(ta, phases)?;
    let affine = tape.gather_cols(arg, &[0])?;
    if f == 1 {
        return Ok(affine);
    }
    let sines = tape.sin(arg)?;
    let rest_cols: Vec<usize> = (1..f).collect();
    let rest = tape.gather_cols(sines, &rest_cols)?;
    tape.concat(&[affine, rest], 1)
}

/// One multi-head attention block with output and query-skip projections:
/// `softmax(QWq (KWk)ᵀ / √d_h) · VWv`, heads concatenated, then
/// `·Wo + Q·Wr`. `key_mask[j] = false` removes key/value row `j` for every
/// query row.
pub fn mha_graph(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    ids: &MhaIds,
    heads: usize,
    key_mask: &[bool],
) -> Result<NodeId> {
    let [nq, _] = crate::gradcore::tensor::dims2(tape.value(q))?;
    let [nk, _] = crate::gradcore::tensor::dims2(tape.value(k))?;
    let out = crate::gradcore::tensor::dims2(tape.value(ids.wq))?[1];
    if heads == 0 || out % heads != 0 {
        return Err(Error::Contract(format!("{heads} heads do not divide the output width {out}")));
    }
    if key_mask.len() != nk {
        return Err(Error::Contract(format!(
            "key mask length {} does not match {} key rows",
            key_mask.len(),
            nk
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::Contract("attention mask excludes every key".into()));
    }
    let dh = out / heads;
    let qp = tape.matmul(q, ids.wq)?;
    let kp = tape.matmul(k, ids.wk)?;
    let vp = tape.matmul(v, ids.wv)?;
    let mut score_mask = Vec::with_capacity(nq * nk);
    for _ in 0..nq {
        score_mask.extend_from_slice(key_mask);
    }
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
        let qh = tape.gather_cols(qp, &cols)?;
        let kh = tape.gather_cols(kp, &cols)?;
        let vh = tape.gather_cols(vp, &cols)?;
        let kt = tape.transpose(kh)?;
        let raw_scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw_scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax_masked(scores, &score_mask)?;
        let head = tape.matmul(attn, vh)?;
        head_outputs.push(head);
    }
    let cat = if heads == 1 { head_outputs[0] } else { tape.concat(&head_outputs, 1)? };
    let projected = tape.matmul(cat, ids.wo)?;
    let skip = tape.matmul(q, ids.wr)?;
    tape.add(projected, skip)
}

/// Encoder outputs for one instance, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncodedInstance {
    /// Encoded context, `[N, M]` (the null token's `[1, M]` when `N = 0`).
    pub h_obs: NodeId,
    /// Per-query code blocks, `[K, D·M]`; columns `[d·M, (d+1)·M)` belong
    /// to component `d`.
    pub h_query: NodeId,
    /// One unnormalized logit per component, `[D, 1]`.
    pub mix_logits: NodeId,
}

fn onehot_rows(channels: &[usize], c: usize) -> Result<Tensor> {
    let mut data = vec![0.0; channels.len() * c];
    for (i, &ch) in channels.iter().enumerate() {
        if ch == 0 || ch > c {
            return Err(Error::Validation(format!("channel {ch} outside [1, {c}]")));
        }
        data[i * c + ch - 1] = 1.0;
    }
    Tensor::new(vec![channels.len(), c], data)
}

/// Builds the full encoding graph for one instance.
///
/// `ctx` is the context as parallel slices `(t, c, v)` (all the same
/// length `N`, possibly empty), `qry` the queries as `(t, c)` of length
/// `K ≥ 1`. Channels are 1-based. With `N = 0` the learned null token is
/// the sole attention key/value; without `null_context` that is an error.
pub fn encode_instance_graph(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    cfg: &EncoderConfig,
    ctx: (&[f64], &[usize], &[f64]),
    qry: (&[f64], &[usize]),
) -> Result<EncodedInstance> {
    cfg.validate()?;
    let (ctx_t, ctx_c, ctx_v) = ctx;
    let (qry_t, qry_c) = qry;
    if ctx_t.len() != ctx_c.len() || ctx_t.len() != ctx_v.len() {
        return Err(Error::Contract(format!(
            "context slices disagree in length: {} / {} / {}",
            ctx_t.len(),
            ctx_c.len(),
            ctx_v.len()
        )));
    }
    if qry_t.len() != qry_c.len() {
        return Err(Error::Contract(format!(
            "query slices disagree in length: {} / {}",
            qry_t.len(),
            qry_c.len()
        )));
    }
    if qry_t.is_empty() {
        return Err(Error::Contract("encoder needs at least one query".into()));
    }
    let n = ctx_t.len();
    let a = node(ids, "enc.pos.a")?;
    let b = node(ids, "enc.pos.b")?;
    let obs_ids = mha_ids(ids, "enc.obs")?;
    let qry_ids = mha_ids(ids, "enc.qry")?;

    // Context rows → h_obs. An empty context falls back to the learned
    // null token so the cross-attention blocks still have one key.
    let h_obs = if n == 0 {
        if !cfg.null_context {
            return Err(Error::Contract(
                "empty context requires the null-context token to be enabled".into(),
            ));
        }
        node(ids, "enc.null")?
    } else {
        let pos = posembed_graph(tape, a, b, ctx_t)?;
        let onehot = tape.constant(onehot_rows(ctx_c, cfg.channels)?)?;
        let values = tape.constant(Tensor::new(vec![n, 1], ctx_v.to_vec())?)?;
        let tokens = tape.concat(&[pos, onehot, values], 1)?;
        mha_graph(tape, tokens, tokens, tokens, &obs_ids, cfg.heads, &vec![true; n])?
    };
    let keys = n.max(1);

    // Query rows → h_query, one D·M-wide code row per query.
    let pos = posembed_graph(tape, a, b, qry_t)?;
    let onehot = tape.constant(onehot_rows(qry_c, cfg.channels)?)?;
    let q_tokens = tape.concat(&[pos, onehot], 1)?;
    let h_query = mha_graph(tape, q_tokens, h_obs, h_obs, &qry_ids, cfg.heads, &vec![true; keys])?;

    // Component queries β → one logit per component. With the mixing
    // head switched off the logits are a constant zero column, i.e.
    // uniform weights.
    let mix_logits = if cfg.learned_weights {
        let mix_ids = mha_ids(ids, "enc.mix")?;
        let beta = node(ids, "enc.beta")?;
        let reduce = node(ids, "enc.mix.reduce")?;
        let mixed = mha_graph(tape, beta, h_obs, h_obs, &mix_ids, cfg.heads, &vec![true; keys])?;
        tape.matmul(mixed, reduce)?
    } else {
        tape.constant(Tensor::zeros(&[cfg.components, 1]))?
    };

    Ok(EncodedInstance { h_obs, h_query, mix_logits })
}

/// Softmax of a logit column as plain values.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}
