//! Marginal-consistency audit: per queried variable, the directly
//! predicted marginal density (row selection) is evaluated on a fixed
//! grid and compared against the joint density numerically integrated
//! over all other variables. The two curves agree up to quadrature error
//! by construction, so the audit's tolerance measures the oracle, not
//! the model — a disagreement beyond it means the analytic
//! marginalization path is broken.
//!
//! The audit is deterministic (no sampling) and works on
//! [`InstanceCodes`], so it applies equally to full models, ablation
//! variants, and loaded checkpoints.

use crate::model::InstanceCodes;
use crate::quadrature::{self, QuadratureConfig};
use crate::{Error, Result};

/// Shape of one audit run.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Evaluation points per variable.
    pub grid_points: usize,
    /// Maximum allowed gap between the curves, relative to the direct
    /// curve's peak.
    pub tolerance: f64,
    /// Half-width of the audit grid in base standard deviations around
    /// each component mean.
    pub grid_sigmas: f64,
    /// Half-width of the integration box in base standard deviations;
    /// must be generous enough that the truncated tail is far below the
    /// tolerance.
    pub integration_sigmas: f64,
    /// Oracle integrator settings.
    pub quadrature: QuadratureConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            grid_points: 41,
            tolerance: 1e-3,
            grid_sigmas: 4.0,
            integration_sigmas: 9.0,
            quadrature: QuadratureConfig { tol: 1e-7, ..QuadratureConfig::default() },
        }
    }
}

impl AuditConfig {
    /// Checks feasibility.
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::Contract(format!(
                "audit grid needs at least 2 points, got {}",
                self.grid_points
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Contract(format!(
                "audit tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if !(self.grid_sigmas > 0.0) || !(self.integration_sigmas >= self.grid_sigmas) {
            return Err(Error::Contract(
                "audit spans must be positive, with the integration span at least as wide \
                 as the grid span"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One variable's pair of density curves and their agreement.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariableAudit {
    /// Queried variable index (0-based).
    pub variable: usize,
    /// Evaluation grid in data space.
    pub grid: Vec<f64>,
    /// Directly predicted marginal pdf on the grid.
    pub direct_pdf: Vec<f64>,
    /// Joint pdf integrated over the other variables, on the same grid.
    pub marginalized_pdf: Vec<f64>,
    /// Largest pointwise gap between the curves.
    pub max_abs_gap: f64,
    /// `max_abs_gap` relative to the direct curve's peak.
    pub max_rel_gap: f64,
    /// Whether `max_rel_gap` stayed below the tolerance.
    pub passed: bool,
}

/// Audit outcome for one instance.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InstanceAudit {
    /// Per-variable results, in query order.
    pub variables: Vec<VariableAudit>,
    /// Tolerance the verdicts used.
    pub tolerance: f64,
    /// True when every variable passed.
    pub passed: bool,
}

/// Compares two density curves; the gap is normalized by the first
/// curve's peak so that near-zero tails do not inflate the ratio.
pub fn compare_curves(direct: &[f64], marginalized: &[f64], tolerance: f64) -> (f64, f64, bool) {
    let peak = direct.iter().cloned().fold(0.0, f64::max);
    let max_abs_gap = direct
        .iter()
        .zip(marginalized)
        .map(|(d, q)| (d - q).abs())
        .fold(0.0, f64::max);
    let max_rel_gap = if peak > 0.0 { max_abs_gap / peak } else { f64::INFINITY };
    (max_abs_gap, max_rel_gap, max_rel_gap < tolerance)
}

/// Data-space interval covering ±`sigmas` base standard deviations of
/// every component for variable `k`, pushed through each component's
/// monotone map.
fn variable_span(codes: &InstanceCodes, k: usize, sigmas: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for comp in &codes.components {
        let mu = comp.base.mu()[k];
        let u = comp.base.u();
        let rank = u.shape()[1];
        let row = &u.data()[k * rank..(k + 1) * rank];
        let var = 1.0 + comp.base.c() * row.iter().map(|x| x * x).sum::<f64>();
        let sd = var.sqrt();
        let (low, _) = comp.knots[k].forward(mu - sigmas * sd);
        let (high, _) = comp.knots[k].forward(mu + sigmas * sd);
        lo = lo.min(low);
        hi = hi.max(high);
    }
    (lo, hi)
}

/// Evenly spaced grid over the union of the component spans.
fn variable_grid(codes: &InstanceCodes, k: usize, cfg: &AuditConfig) -> Vec<f64> {
    let (lo, hi) = variable_span(codes, k, cfg.grid_sigmas);
    let n = cfg.grid_points;
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Joint pdf marginalized onto variable `k` by adaptive quadrature over
/// the other variables (one or two of them).
fn marginalized_pdf_at(
    codes: &InstanceCodes,
    k: usize,
    y_k: f64,
    cfg: &AuditConfig,
) -> Result<f64> {
    let others: Vec<usize> = (0..codes.k()).filter(|&j| j != k).collect();
    let spans: Vec<(f64, f64)> =
        others.iter().map(|&j| variable_span(codes, j, cfg.integration_sigmas)).collect();
    let joint = |y: &[f64]| -> Result<f64> { Ok(codes.log_density(y)?.log_joint.exp()) };
    match others.as_slice() {
        [j] => {
            let mut y = vec![0.0; codes.k()];
            y[k] = y_k;
            let j = *j;
            quadrature::integrate(
                |yj| {
                    y[j] = yj;
                    joint(&y)
                },
                spans[0].0,
                spans[0].1,
                &cfg.quadrature,
            )
        }
        [j1, j2] => {
            let mut y = vec![0.0; codes.k()];
            y[k] = y_k;
            let (j1, j2) = (*j1, *j2);
            quadrature::integrate2(
                |a, b| {
                    y[j1] = a;
                    y[j2] = b;
                    joint(&y)
                },
                spans[0].0,
                spans[0].1,
                spans[1].0,
                spans[1].1,
                &cfg.quadrature,
            )
        }
        _ => Err(Error::Contract(format!(
            "consistency audit integrates over at most 2 variables, so K must be 2 or 3; \
             got K = {}",
            codes.k()
        ))),
    }
}

/// Audits one instance's codes: every queried variable's direct marginal
/// against the quadrature-marginalized joint.
pub fn audit_codes(codes: &InstanceCodes, cfg: &AuditConfig) -> Result<InstanceAudit> {
    cfg.validate()?;
    if !(2..=3).contains(&codes.k()) {
        return Err(Error::Contract(format!(
            "consistency audit requires 2 or 3 queried variables, got {}",
            codes.k()
        )));
    }
    let mut variables = Vec::with_capacity(codes.k());
    for k in 0..codes.k() {
        let grid = variable_grid(codes, k, cfg);
        let marginal = codes.select(&[k])?;
        let direct_pdf: Vec<f64> = grid
            .iter()
            .map(|&y| Ok(marginal.log_density(&[y])?.log_joint.exp()))
            .collect::<Result<_>>()?;
        let marginalized_pdf: Vec<f64> = grid
            .iter()
            .map(|&y| marginalized_pdf_at(codes, k, y, cfg))
            .collect::<Result<_>>()?;
        let (max_abs_gap, max_rel_gap, passed) =
            compare_curves(&direct_pdf, &marginalized_pdf, cfg.tolerance);
        variables.push(VariableAudit {
            variable: k,
            grid,
            direct_pdf,
            marginalized_pdf,
            max_abs_gap,
            max_rel_gap,
            passed,
        });
    }
    let passed = variables.iter().all(|v| v.passed);
    Ok(InstanceAudit { variables, tolerance: cfg.tolerance, passed })
}
