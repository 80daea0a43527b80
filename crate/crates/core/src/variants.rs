//! Ablation variants: restricted versions of the model obtained by
//! switching parts off, never by forking the implementation.
//!
//! Four composable flags cover the family:
//!
//! * `disable_flows` — every per-variable map is pinned to the identity
//!   (zero log-Jacobian), leaving a conditional Gaussian mixture (the
//!   "GMM" baseline).
//! * `identity_covariance` — the low-rank covariance factor is removed,
//!   so every component's base is isotropic, `Σ = I`.
//! * `uniform_weights` — mixture weights are fixed to `1/D` independent
//!   of the context.
//! * `single_component` — `D = 1`.
//!
//! A flag removes the corresponding parameter tensors from the model
//! entirely rather than freezing them, so optimizers, checkpoints, and
//! parameter counts all reflect exactly what the variant can learn.
//! Every variant stays inside the marginalization-consistent family: row
//! selection still yields exact marginals.

use crate::model::{ModelConfig, MosesModel};
use crate::{Error, Result};

/// Which restrictions to apply; all off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    /// Pin every per-variable map to the identity (Gaussian mixture).
    pub disable_flows: bool,
    /// Drop the covariance factor; every base is `N(μ, I)`.
    pub identity_covariance: bool,
    /// Fix mixture weights to `1/D` regardless of context.
    pub uniform_weights: bool,
    /// Use a single mixture component.
    pub single_component: bool,
}

impl VariantSpec {
    /// The unrestricted model.
    pub fn full() -> VariantSpec {
        VariantSpec::default()
    }

    /// True when no restriction is active.
    pub fn is_full(&self) -> bool {
        *self == VariantSpec::default()
    }

    /// Parses a variant name: `full`, `gmm` (no flows), `isotropic`
    /// (identity covariance), `uniform` (uniform weights), or `single`
    /// (one component); compose with `+`, e.g. `gmm+single`.
    pub fn parse(name: &str) -> Result<VariantSpec> {
        let mut spec = VariantSpec::default();
        for part in name.split('+') {
            match part.trim() {
                "full" => {}
                "gmm" => spec.disable_flows = true,
                "isotropic" => spec.identity_covariance = true,
                "uniform" => spec.uniform_weights = true,
                "single" => spec.single_component = true,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown variant '{other}' (expected full, gmm, isotropic, uniform, \
                         or single, composed with '+')"
                    )))
                }
            }
        }
        Ok(spec)
    }

    /// Canonical name, the inverse of [`Self::parse`].
    pub fn label(&self) -> String {
        if self.is_full() {
            return "full".into();
        }
        let mut parts = Vec::new();
        if self.disable_flows {
            parts.push("gmm");
        }
        if self.identity_covariance {
            parts.push("isotropic");
        }
        if self.uniform_weights {
            parts.push("uniform");
        }
        if self.single_component {
            parts.push("single");
        }
        parts.join("+")
    }

    /// Applies the restrictions to a base configuration.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = *base;
        cfg.variant = *self;
        if self.single_component {
            cfg.components = 1;
        }
        cfg
    }
}

impl std::fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<VariantSpec> {
        VariantSpec::parse(s)
    }
}

/// Builds a freshly initialized model with the given restrictions applied
/// to the base hyperparameters.
pub fn build_variant(base: &ModelConfig, spec: VariantSpec, seed: u64) -> Result<MosesModel> {
    MosesModel::new(spec.apply(base), seed)
}
