//! The full model: a mixture of separable flows over low-rank Gaussians.
//!
//! A forecast distribution for `K` queried variables is built in four
//! stages: the attention encoder turns `(X, Q)` into per-query,
//! per-component codes `h_{d,k} ∈ ℝ^M` and mixture weights `w`; each
//! component places a low-rank Gaussian `N(μ(h_d), Σ(h_d))` over a base
//! vector `z`; each variable is pushed through its own monotone spline
//! `y_k = φ(z_k; h_{d,k})`; and the `D` component densities are mixed
//! with `w`. Density evaluation (the training objective) runs the splines
//! backwards, `z = φ⁻¹(y)`, and adds the diagonal log-Jacobian.
//!
//! Because every variable's spline depends only on its own query and the
//! Jacobian is diagonal, restricting the model to a subset of queries is
//! exactly a row selection of `μ`, the covariance factor, and the spline
//! list — marginal densities are analytic, not integrals. That property
//! is surfaced by [`InstanceCodes::select`] and checked against numerical
//! integration in the test suites.
//!
//! Two call styles share the same arithmetic: [`MosesModel::codes`]
//! extracts plain-value codes for density queries, sampling, and metrics,
//! while [`joint_log_density_graph`] builds the identical computation as
//! a tape graph for training.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::encoder::{self, EncoderConfig};
use crate::gradcore::{NodeId, ParamStore, Tape, Tensor};
use crate::lowrank::{self, LowRankGaussian};
use crate::lrs::{self, SplineConfig, SplineKnots};
use crate::series::{ContextPoint, QueryPoint, TimeSeriesInstance};
use crate::variants::VariantSpec;
use crate::{Error, Result};

/// Hyperparameters of the full model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Mixture components `D`.
    pub components: usize,
    /// Code width `M`.
    pub latent: usize,
    /// Covariance factor rank `M′`.
    pub cov_rank: usize,
    /// Positional-embedding dimension `F`.
    pub pos_dim: usize,
    /// Attention heads `H`.
    pub heads: usize,
    /// Channel count `C`.
    pub channels: usize,
    /// Learn a null token so empty contexts are valid input.
    pub null_context: bool,
    /// Per-variable spline shape.
    pub spline: SplineConfig,
    /// Ablation restrictions; [`VariantSpec::default`] is the full model.
    #[serde(default)]
    pub variant: VariantSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            components: 2,
            latent: 16,
            cov_rank: 4,
            pos_dim: 8,
            heads: 2,
            channels: 2,
            null_context: true,
            spline: SplineConfig::default(),
            variant: VariantSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Checks all dimensional constraints.
    pub fn validate(&self) -> Result<()> {
        if self.cov_rank == 0 {
            return Err(Error::Contract("covariance rank must be at least 1".into()));
        }
        if self.variant.single_component && self.components != 1 {
            return Err(Error::Contract(format!(
                "single-component variant requires D = 1, got D = {}",
                self.components
            )));
        }
        self.encoder_config().validate()?;
        self.spline.validate()
    }

    /// The encoder portion of the configuration.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            components: self.components,
            latent: self.latent,
            pos_dim: self.pos_dim,
            channels: self.channels,
            heads: self.heads,
            null_context: self.null_context,
            learned_weights: !self.variant.uniform_weights,
        }
    }

    /// Names and shapes of every parameter tensor the model owns.
    fn expected_params(&self) -> Vec<(String, [usize; 2])> {
        let m = self.latent;
        let d = self.components;
        let f = self.pos_dim;
        let ctx_w = self.encoder_config().context_token_width();
        let qry_w = self.encoder_config().query_token_width();
        let mut out: Vec<(String, [usize; 2])> = vec![
            ("enc.pos.a".into(), [1, f]),
            ("enc.pos.b".into(), [1, f]),
            ("base.mean".into(), [m, 1]),
        ];
        let mut blocks = vec![("enc.obs", ctx_w, ctx_w, m), ("enc.qry", qry_w, m, d * m)];
        if !self.variant.uniform_weights {
            out.push(("enc.beta".into(), [d, m]));
            out.push(("enc.mix.reduce".into(), [m, 1]));
            blocks.push(("enc.mix", m, m, m));
        }
        if !self.variant.identity_covariance {
            out.push(("base.cov".into(), [m, self.cov_rank]));
        }
        if !self.variant.disable_flows {
            out.push(("flow.proj".into(), [m, self.spline.raw_param_count()]));
        }
        for (prefix, qw, kw, ow) in blocks {
            out.push((format!("{prefix}.wq"), [qw, ow]));
            out.push((format!("{prefix}.wk"), [kw, ow]));
            out.push((format!("{prefix}.wv"), [kw, ow]));
            out.push((format!("{prefix}.wo"), [ow, ow]));
            out.push((format!("{prefix}.wr"), [qw, ow]));
        }
        if self.null_context {
            out.push(("enc.null".into(), [1, m]));
        }
        out.sort();
        out
    }
}

/// Joint log-density together with its mixture decomposition.
#[derive(Clone, Debug)]
pub struct JointDensityResult {
    /// `log Σ_d w_d p_d(y)`.
    pub log_joint: f64,
    /// Per-component conditional log-densities `log p_d(y)`.
    pub log_components: Vec<f64>,
    /// Log mixture weights `log w_d`.
    pub log_weights: Vec<f64>,
}

/// One component's decoder heads for a fixed `(X, Q)`: the base Gaussian
/// over all `K` variables and one spline per variable.
#[derive(Clone, Debug)]
pub struct ComponentCodes {
    /// Low-rank Gaussian over the base vector `z ∈ ℝ^K`.
    pub base: LowRankGaussian,
    /// Per-variable monotone maps, `knots[k]` for query `k`.
    pub knots: Vec<SplineKnots>,
}

/// Everything the decoder needs about one instance, with the encoder
/// already applied: mixture log-weights plus per-component codes.
/// Restriction to a sub-query is a pure row selection ([`Self::select`]).
#[derive(Clone, Debug)]
pub struct InstanceCodes {
    /// `log w_d`; sums to one after exponentiation.
    pub log_weights: Vec<f64>,
    /// Per-component decoder heads.
    pub components: Vec<ComponentCodes>,
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl InstanceCodes {
    /// Number of queried variables.
    pub fn k(&self) -> usize {
        self.components.first().map_or(0, |c| c.base.k())
    }

    /// Mixture weights as probabilities.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|&lw| lw.exp()).collect()
    }

    /// Restricts the codes to a subset of query indices (0-based); the
    /// marginal model of the selected variables. Weights are untouched —
    /// the marginal of the mixture is the mixture of the marginals.
    pub fn select(&self, subset: &[usize]) -> Result<InstanceCodes> {
        let k = self.k();
        if subset.is_empty() {
            return Err(Error::Contract("marginal subset is empty".into()));
        }
        let mut seen = vec![false; k];
        for &i in subset {
            if i >= k {
                return Err(Error::Contract(format!("query index {i} out of range for K={k}")));
            }
            if seen[i] {
                return Err(Error::Contract(format!("query index {i} repeated in subset")));
            }
            seen[i] = true;
        }
        let components = self
            .components
            .iter()
            .map(|c| {
                Ok(ComponentCodes {
                    base: c.base.marginalize(subset)?,
                    knots: subset.iter().map(|&i| c.knots[i].clone()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceCodes { log_weights: self.log_weights.clone(), components })
    }

    /// Joint log-density of the answers `y` (length `K`): each component
    /// maps `y` back through its splines, scores the base point under its
    /// Gaussian, adds the diagonal log-Jacobian, and the mixture combines
    /// everything in log space.
    pub fn log_density(&self, y: &[f64]) -> Result<JointDensityResult> {
        if y.len() != self.k() {
            return Err(Error::Contract(format!(
                "{} answers for {} queried variables",
                y.len(),
                self.k()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite answer value".into()));
        }
        let mut log_components = Vec::with_capacity(self.components.len());
        for (d, comp) in self.components.iter().enumerate() {
            let (z, logd) = lrs::separable_inverse(&comp.knots, y)?;
            for (k, &zk) in z.iter().enumerate() {
                if !zk.is_finite() {
                    return Err(Error::Numerical(format!(
                        "component {d}, variable {k}: non-finite base point"
                    )));
                }
            }
            let base_lp = comp
                .base
                .log_density(&z)
                .map_err(|e| Error::Numerical(format!("component {d}: {e}")))?;
            log_components.push(base_lp + logd);
        }
        let terms: Vec<f64> =
            self.log_weights.iter().zip(&log_components).map(|(lw, lp)| lw + lp).collect();
        Ok(JointDensityResult {
            log_joint: logsumexp(&terms),
            log_components,
            log_weights: self.log_weights.clone(),
        })
    }

    /// Draws one joint sample, returning the component index it came from
    /// along with the values.
    pub fn sample_with_component<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, Vec<f64>)> {
        // Inverse-CDF on the cumulative weights with a single uniform.
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut d = self.components.len() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            cum += lw.exp();
            if u < cum {
                d = i;
                break;
            }
        }
        let comp = &self.components[d];
        let z = comp.base.sample(rng);
        let (y, _) = lrs::separable_forward(&comp.knots, &z)?;
        Ok((d, y))
    }

    /// Draws one joint sample of all `K` variables.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.sample_with_component(rng)?.1)
    }
}

/// A single queried variable's predictive distribution: the model
/// marginalized to one query, wrapped with scalar-friendly accessors.
#[derive(Clone, Debug)]
pub struct UnivariateMarginal(InstanceCodes);

impl UnivariateMarginal {
    /// Log-density of one value under the marginal mixture.
    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        Ok(self.0.log_density(&[y])?.log_joint)
    }

    /// One draw from the marginal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        Ok(self.0.sample(rng)?[0])
    }

    /// The underlying single-variable codes.
    pub fn codes(&self) -> &InstanceCodes {
        &self.0
    }
}

/// The trained object: hyperparameters plus all parameter tensors.
#[derive(Clone, Debug)]
pub struct MosesModel {
    config: ModelConfig,
    params: ParamStore,
}

impl MosesModel {
    /// Fresh model with the documented initialization: attention blocks
    /// ~ N(0, 1/fan_in), log-spaced positional frequencies, Gaussian-head
    /// projections ~ N(0, 0.1²), and a zero flow head — so every spline
    /// starts as the identity and the initial model is a mixture of
    /// low-rank Gaussians.
    pub fn new(config: ModelConfig, seed: u64) -> Result<MosesModel> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_encoder_params(&mut params, &config.encoder_config(), &mut rng)?;
        let m = config.latent;
        let head_std = 0.1;
        let mean_data: Vec<f64> =
            (0..m).map(|_| head_std * rng.sample::<f64, _>(StandardNormal)).collect();
        params.insert("base.mean", Tensor::new(vec![m, 1], mean_data)?)?;
        if !config.variant.identity_covariance {
            let cov_data: Vec<f64> = (0..m * config.cov_rank)
                .map(|_| head_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.insert("base.cov", Tensor::new(vec![m, config.cov_rank], cov_data)?)?;
        }
        if !config.variant.disable_flows {
            params.insert("flow.proj", Tensor::zeros(&[m, config.spline.raw_param_count()]))?;
        }
        Ok(MosesModel { config, params })
    }

    /// Reassembles a model from a configuration and a parameter store,
    /// checking that exactly the expected tensors are present with the
    /// expected shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<MosesModel> {
        config.validate()?;
        let expected = config.expected_params();
        let mut names = params.names();
        names.sort();
        let expected_names: Vec<String> = expected.iter().map(|(n, _)| n.clone()).collect();
        if names != expected_names {
            return Err(Error::Contract(format!(
                "parameter names do not match the configuration: got {names:?}, expected {expected_names:?}"
            )));
        }
        for (name, shape) in &expected {
            let tensor = params.get(name)?;
            if tensor.shape() != shape {
                return Err(Error::Contract(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            if !tensor.is_finite() {
                return Err(Error::Numerical(format!("parameter '{name}' is not finite")));
            }
        }
        Ok(MosesModel { config, params })
    }

    /// The hyperparameters.
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All parameter tensors.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access for optimizers.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs the encoder and decodes per-component codes for one `(X, Q)`
    /// pair. All density, marginalization, and sampling queries go
    /// through the result.
    pub fn codes(&self, context: &[ContextPoint], query: &[QueryPoint]) -> Result<InstanceCodes> {
        let mut tape = Tape::new();
        let ids = tape.register(&self.params)?;
        let (ct, cc, cv) = context_slices(context);
        let (qt, qc) = query_slices(query);
        let enc = encoder::encode_instance_graph(
            &mut tape,
            &ids,
            &self.config.encoder_config(),
            (&ct, &cc, &cv),
            (&qt, &qc),
        )?;
        let h_query = tape.value(enc.h_query).clone();
        let logits = tape.value(enc.mix_logits).data().to_vec();
        let lse = logsumexp(&logits);
        let log_weights: Vec<f64> = logits.iter().map(|&l| l - lse).collect();

        let m = self.config.latent;
        let variant = self.config.variant;
        let theta_mean = self.params.get("base.mean")?;
        // An absent covariance factor is a zero factor: Σ = I exactly.
        let zero_cov = Tensor::zeros(&[m, 1]);
        let theta_cov =
            if variant.identity_covariance { &zero_cov } else { self.params.get("base.cov")? };
        let k = query.len();
        let mut components = Vec::with_capacity(self.config.components);
        for d in 0..self.config.components {
            let cols: Vec<usize> = (d * m..(d + 1) * m).collect();
            let h_d = h_query.select_cols(&cols)?;
            let base = LowRankGaussian::build(&h_d, theta_mean, theta_cov)?;
            let knots = if variant.disable_flows {
                (0..k).map(|_| SplineKnots::identity(&self.config.spline)).collect::<Result<_>>()?
            } else {
                lrs::knots_from_codes(&h_d, self.params.get("flow.proj")?, &self.config.spline)?
            };
            components.push(ComponentCodes { base, knots });
        }
        Ok(InstanceCodes { log_weights, components })
    }

    /// Joint log-density of an instance's answers.
    pub fn log_density(&self, instance: &TimeSeriesInstance) -> Result<JointDensityResult> {
        instance.validate()?;
        self.codes(&instance.context, &instance.query)?.log_density(&instance.answer)
    }

    /// Marginal log-density over a subset of the instance's queries,
    /// computed analytically by row selection — no integration.
    pub fn marginal_log_density(
        &self,
        instance: &TimeSeriesInstance,
        subset: &[usize],
    ) -> Result<JointDensityResult> {
        instance.validate()?;
        let codes = self.codes(&instance.context, &instance.query)?;
        let sub = codes.select(subset)?;
        let y: Vec<f64> = subset.iter().map(|&i| instance.answer[i]).collect();
        sub.log_density(&y)
    }

    /// One joint sample for the queried variables.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        context: &[ContextPoint],
        query: &[QueryPoint],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.codes(context, query)?.sample(rng)
    }

    /// `n` joint samples with a single encoder pass.
    pub fn sample_many<R: Rng + ?Sized>(
        &self,
        context: &[ContextPoint],
        query: &[QueryPoint],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let codes = self.codes(context, query)?;
        (0..n).map(|_| codes.sample(rng)).collect()
    }

    /// Per-query univariate predictive marginals. Each is exactly the
    /// model marginalized to that query — the same row selection as
    /// [`Self::marginal_log_density`] on a singleton.
    pub fn predict_univariate_marginals(
        &self,
        context: &[ContextPoint],
        query: &[QueryPoint],
    ) -> Result<Vec<UnivariateMarginal>> {
        let codes = self.codes(context, query)?;
        (0..codes.k()).map(|k| Ok(UnivariateMarginal(codes.select(&[k])?))).collect()
    }
}

/// Flattens context points into parallel slices for the encoder.
pub(crate) fn context_slices(context: &[ContextPoint]) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let t = context.iter().map(|p| p.t).collect();
    let c = context.iter().map(|p| p.c).collect();
    let v = context.iter().map(|p| p.v).collect();
    (t, c, v)
}

/// Flattens query points into parallel slices for the encoder.
pub(crate) fn query_slices(query: &[QueryPoint]) -> (Vec<f64>, Vec<usize>) {
    let t = query.iter().map(|p| p.t).collect();
    let c = query.iter().map(|p| p.c).collect();
    (t, c)
}

fn node(ids: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not registered")))
}

/// Builds the joint log-density of one instance as a tape graph — the
/// training-path twin of [`InstanceCodes::log_density`]. `ids` must come
/// from registering the model's parameters on `tape`.
pub fn joint_log_density_graph(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
    instance: &TimeSeriesInstance,
) -> Result<NodeId> {
    instance.validate()?;
    if instance.k() == 0 {
        return Err(Error::Contract("instance has no queries".into()));
    }
    let (ct, cc, cv) = context_slices(&instance.context);
    let (qt, qc) = query_slices(&instance.query);
    let enc = encoder::encode_instance_graph(
        tape,
        ids,
        &cfg.encoder_config(),
        (&ct, &cc, &cv),
        (&qt, &qc),
    )?;
    let y = tape.constant(Tensor::new(vec![instance.k(), 1], instance.answer.clone())?)?;
    let theta_mean = node(ids, "base.mean")?;
    // Variant restrictions swap learned pieces for their fixed forms: a
    // zero covariance factor (Σ = I) and the identity map (z = y, zero
    // log-Jacobian).
    let theta_cov = if cfg.variant.identity_covariance {
        None
    } else {
        Some(node(ids, "base.cov")?)
    };
    let theta_flow = if cfg.variant.disable_flows { None } else { Some(node(ids, "flow.proj")?) };
    let zero_u = tape.constant(Tensor::zeros(&[instance.k(), 1]))?;

    let m = cfg.latent;
    let mut comp_terms = Vec::with_capacity(cfg.components);
    for d in 0..cfg.components {
        let cols: Vec<usize> = (d * m..(d + 1) * m).collect();
        let h_d = tape.gather_cols(enc.h_query, &cols)?;
        let mu = tape.matmul(h_d, theta_mean)?;
        let u = match theta_cov {
            Some(tc) => tape.matmul(h_d, tc)?,
            None => zero_u,
        };
        let lp = match theta_flow {
            Some(tf) => {
                let raw = tape.matmul(h_d, tf)?;
                let knots = lrs::knots_graph(tape, raw, &cfg.spline)?;
                let (z, logd) = lrs::inverse_graph(tape, &knots, y, &cfg.spline)?;
                let base_lp = lowrank::log_density_graph(tape, mu, u, z)?;
                let logd_sum = tape.sum(logd)?;
                tape.add(base_lp, logd_sum)?
            }
            None => lowrank::log_density_graph(tape, mu, u, y)?,
        };
        comp_terms.push(lp);
    }
    let stack = if comp_terms.len() == 1 { comp_terms[0] } else { tape.concat(&comp_terms, 0)? };
    let stack = tape.reshape(stack, vec![cfg.components, 1])?;
    let weighted = tape.add(enc.mix_logits, stack)?;
    let lse_num = tape.logsumexp(weighted)?;
    let lse_den = tape.logsumexp(enc.mix_logits)?;
    tape.sub(lse_num, lse_den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::gradcheck;
    use crate::quadrature::{self, QuadratureConfig};
    use rand::SeedableRng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            components: 2,
            latent: 4,
            cov_rank: 2,
            pos_dim: 2,
            heads: 2,
            channels: 2,
            null_context: true,
            spline: SplineConfig { bins: 4, ..SplineConfig::default() },
            variant: VariantSpec::default(),
        }
    }

    fn toy_instance() -> TimeSeriesInstance {
        TimeSeriesInstance {
            context: vec![
                ContextPoint { t: 0.1, c: 1, v: 0.7 },
                ContextPoint { t: 0.25, c: 2, v: -0.4 },
                ContextPoint { t: 0.4, c: 1, v: 1.3 },
            ],
            query: vec![QueryPoint { t: 0.5, c: 1 }, QueryPoint { t: 1.0, c: 2 }],
            answer: vec![0.8, -1.1],
        }
    }

    fn standard_normal_model() -> MosesModel {
        // Zeroed Gaussian heads on top of the zero-initialized flow head:
        // μ = 0, Σ = I, φ = id, so the joint is an exact standard normal.
        let cfg = ModelConfig { components: 1, ..small_config() };
        let mut model = MosesModel::new(cfg, 7).unwrap();
        let m = cfg.latent;
        model.params_mut().set("base.mean", Tensor::zeros(&[m, 1])).unwrap();
        model.params_mut().set("base.cov", Tensor::zeros(&[m, cfg.cov_rank])).unwrap();
        model
    }

    fn std_normal_logpdf(y: &[f64]) -> f64 {
        y.iter().map(|&v| -0.5 * (v * v + (2.0 * std::f64::consts::PI).ln())).sum()
    }

    #[test]
    fn zeroed_heads_reduce_to_a_standard_normal_joint() {
        let model = standard_normal_model();
        let instance = toy_instance();
        let res = model.log_density(&instance).unwrap();
        let expected = std_normal_logpdf(&instance.answer);
        assert!(
            (res.log_joint - expected).abs() < 1e-12,
            "{} vs {expected}",
            res.log_joint
        );
    }

    #[test]
    fn log_joint_is_invariant_under_context_and_query_permutations() {
        let model = MosesModel::new(small_config(), 11).unwrap();
        let instance = toy_instance();
        let base = model.log_density(&instance).unwrap().log_joint;

        let mut ctx_permuted = instance.clone();
        ctx_permuted.context = vec![
            instance.context[2].clone(),
            instance.context[0].clone(),
            instance.context[1].clone(),
        ];
        let permuted = model.log_density(&ctx_permuted).unwrap().log_joint;
        assert!((base - permuted).abs() < 1e-12, "context order moved the density");

        let mut qry_permuted = instance.clone();
        qry_permuted.query = vec![instance.query[1].clone(), instance.query[0].clone()];
        qry_permuted.answer = vec![instance.answer[1], instance.answer[0]];
        let permuted = model.log_density(&qry_permuted).unwrap().log_joint;
        assert!((base - permuted).abs() < 1e-12, "query order moved the density");
    }

    #[test]
    fn joint_density_integrates_to_one() {
        let model = MosesModel::new(small_config(), 13).unwrap();
        let instance = toy_instance();
        let codes = model.codes(&instance.context, &instance.query).unwrap();
        let cfg = QuadratureConfig { tol: 1e-5, ..QuadratureConfig::default() };
        let lim = model.config().spline.tail_bound + 10.0;
        let mass = quadrature::integrate2(
            |y0, y1| Ok(codes.log_density(&[y0, y1])?.log_joint.exp()),
            -lim,
            lim,
            -lim,
            lim,
            &cfg,
        )
        .unwrap();
        assert!((mass - 1.0).abs() < 1e-3, "total mass {mass}");
    }

    #[test]
    fn full_subset_marginal_is_bit_equal_to_the_joint() {
        let model = MosesModel::new(small_config(), 17).unwrap();
        let instance = toy_instance();
        let joint = model.log_density(&instance).unwrap();
        let marginal = model.marginal_log_density(&instance, &[0, 1]).unwrap();
        assert_eq!(joint.log_joint, marginal.log_joint);
        assert_eq!(joint.log_components, marginal.log_components);
        assert_eq!(joint.log_weights, marginal.log_weights);
    }

    #[test]
    fn analytic_marginal_matches_the_integrated_joint() {
        let model = MosesModel::new(small_config(), 19).unwrap();
        let instance = toy_instance();
        let codes = model.codes(&instance.context, &instance.query).unwrap();
        let marginal = codes.select(&[0]).unwrap();
        let cfg = QuadratureConfig { tol: 1e-8, ..QuadratureConfig::default() };
        let lim = model.config().spline.tail_bound + 10.0;
        for y0 in [-1.5, -0.2, 0.9, 2.4] {
            let direct = marginal.log_density(&[y0]).unwrap().log_joint.exp();
            let integrated = quadrature::integrate(
                |y1| Ok(codes.log_density(&[y0, y1])?.log_joint.exp()),
                -lim,
                lim,
                &cfg,
            )
            .unwrap();
            let rel = (direct - integrated).abs() / direct.max(integrated);
            assert!(rel < 1e-3, "y0={y0}: direct {direct} vs integrated {integrated}");
        }
    }

    #[test]
    fn marginalization_keeps_the_mixture_weights() {
        let model = MosesModel::new(small_config(), 23).unwrap();
        let instance = toy_instance();
        let joint = model.log_density(&instance).unwrap();
        let marginal = model.marginal_log_density(&instance, &[1]).unwrap();
        assert_eq!(joint.log_weights, marginal.log_weights);
    }

    #[test]
    fn log_joint_decomposes_over_components_and_weights() {
        let model = MosesModel::new(small_config(), 29).unwrap();
        let res = model.log_density(&toy_instance()).unwrap();
        let terms: Vec<f64> =
            res.log_weights.iter().zip(&res.log_components).map(|(w, p)| w + p).collect();
        let recombined = logsumexp(&terms);
        assert!((res.log_joint - recombined).abs() < 1e-12);
        assert!((res.log_weights.iter().map(|w| w.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samples_from_the_reduced_model_look_standard_normal() {
        let model = standard_normal_model();
        let query = vec![QueryPoint { t: 0.4, c: 1 }];
        let codes = model.codes(&[], &query).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let draws: Vec<f64> = (0..10_000).map(|_| codes.sample(&mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05, "sample mean {mean}");
        assert!((0.9..=1.1).contains(&var), "sample variance {var}");
    }

    #[test]
    fn component_frequencies_track_the_mixture_weights() {
        let cfg = ModelConfig { components: 3, ..small_config() };
        let model = MosesModel::new(cfg, 37).unwrap();
        let instance = toy_instance();
        let codes = model.codes(&instance.context, &instance.query).unwrap();
        let w = codes.weights();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let mut counts = vec![0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (d, _) = codes.sample_with_component(&mut rng).unwrap();
            counts[d] += 1;
        }
        for d in 0..3 {
            let freq = counts[d] as f64 / n as f64;
            assert!((freq - w[d]).abs() < 0.02, "component {d}: {freq} vs {}", w[d]);
        }
    }

    #[test]
    fn sampling_is_reproducible_for_a_fixed_seed() {
        let model = MosesModel::new(small_config(), 43).unwrap();
        let instance = toy_instance();
        let mut rng1 = ChaCha20Rng::seed_from_u64(99);
        let mut rng2 = ChaCha20Rng::seed_from_u64(99);
        let a = model.sample_many(&instance.context, &instance.query, 5, &mut rng1).unwrap();
        let b = model.sample_many(&instance.context, &instance.query, 5, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn univariate_marginals_are_bit_equal_to_singleton_marginals() {
        let model = MosesModel::new(small_config(), 47).unwrap();
        let instance = toy_instance();
        let marginals =
            model.predict_univariate_marginals(&instance.context, &instance.query).unwrap();
        for (k, marginal) in marginals.iter().enumerate() {
            let direct = model.marginal_log_density(&instance, &[k]).unwrap();
            let wrapped = marginal.log_pdf(instance.answer[k]).unwrap();
            assert_eq!(wrapped, direct.log_joint, "query {k}");
        }
    }

    #[test]
    fn univariate_marginal_density_integrates_to_one() {
        let model = MosesModel::new(small_config(), 53).unwrap();
        let instance = toy_instance();
        let marginals =
            model.predict_univariate_marginals(&instance.context, &instance.query).unwrap();
        let cfg = QuadratureConfig { tol: 1e-9, ..QuadratureConfig::default() };
        let lim = model.config().spline.tail_bound + 10.0;
        for (k, marginal) in marginals.iter().enumerate() {
            let mass =
                quadrature::integrate(|y| Ok(marginal.log_pdf(y)?.exp()), -lim, lim, &cfg)
                    .unwrap();
            assert!((mass - 1.0).abs() < 1e-4, "query {k}: mass {mass}");
        }
    }

    #[test]
    fn graph_log_density_matches_the_value_path() {
        let model = MosesModel::new(small_config(), 59).unwrap();
        let instance = toy_instance();
        let value = model.log_density(&instance).unwrap().log_joint;
        let mut tape = Tape::new();
        let ids = tape.register(model.params()).unwrap();
        let node = joint_log_density_graph(&mut tape, &ids, model.config(), &instance).unwrap();
        let graph = tape.value(node).item().unwrap();
        assert!((value - graph).abs() < 1e-12, "value {value} vs graph {graph}");
    }

    #[test]
    fn log_density_gradients_match_finite_differences() {
        let model = MosesModel::new(small_config(), 61).unwrap();
        let instance = toy_instance();
        let eval = |p: &ParamStore| -> Result<(Tape, NodeId)> {
            let mut tape = Tape::new();
            let ids = tape.register(p)?;
            let node = joint_log_density_graph(&mut tape, &ids, model.config(), &instance)?;
            Ok((tape, node))
        };
        let (tape, node) = eval(model.params()).unwrap();
        let grads = tape.backward(node).unwrap();
        let numeric = gradcheck::finite_difference(
            |p| {
                let (tape, node) = eval(p)?;
                tape.value(node).item()
            },
            model.params(),
            1e-5,
        )
        .unwrap();
        let err = gradcheck::max_relative_error(&grads, &numeric).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn invalid_subsets_are_rejected() {
        let model = MosesModel::new(small_config(), 67).unwrap();
        let instance = toy_instance();
        assert!(model.marginal_log_density(&instance, &[]).is_err());
        assert!(model.marginal_log_density(&instance, &[2]).is_err());
        assert!(model.marginal_log_density(&instance, &[0, 0]).is_err());
    }

    #[test]
    fn rebuilding_from_parts_round_trips_and_validates() {
        let cfg = small_config();
        let model = MosesModel::new(cfg, 71).unwrap();
        let instance = toy_instance();
        let expected = model.log_density(&instance).unwrap().log_joint;
        let rebuilt = MosesModel::from_parts(cfg, model.params().clone()).unwrap();
        assert_eq!(rebuilt.log_density(&instance).unwrap().log_joint, expected);

        let mut missing = model.params().clone();
        let extra = ModelConfig { cov_rank: 3, ..cfg };
        assert!(MosesModel::from_parts(extra, missing.clone()).is_err());
        missing.insert("stray", Tensor::zeros(&[1, 1])).unwrap();
        assert!(MosesModel::from_parts(cfg, missing).is_err());
    }
}
