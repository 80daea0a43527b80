//! Conditional univariate linear rational spline (LRS) bijections.
//!
//! Each variable gets a monotone map `φ: ℝ → ℝ` assembled from `M_b` bins
//! on `[−B, B]` and identity tails outside. Within a bin, `φ` is the
//! two-piece linear rational map through a virtual knot at relative
//! position `λ`: both pieces are ratios of affine functions, so forward
//! evaluation, the exact inverse, and the log-derivative are all closed
//! form. Per-bin weights are derived from the knot derivatives so the map
//! is C¹ at every knot, including the virtual one.
//!
//! Knots come from raw parameters (a linear projection of a variable's
//! encoding): widths and heights through a scaled softmax with a minimum
//! bin fraction, interior derivatives through a shifted softplus with a
//! minimum slope, and `λ` through a rescaled sigmoid. Boundary derivatives
//! are pinned to 1 so the spline meets the identity tails with matching
//! slope. The shifts are arranged so that all-zero raw parameters yield
//! the identity map, letting models start as a plain Gaussian.
//!
//! Two code paths share every formula: plain `f64` evaluation
//! ([`SplineKnots`]) for sampling and density queries, and tape graphs
//! ([`knots_graph`], [`inverse_graph`]) for training. Branch selection
//! (tail / piece / bin) is value-determined in both, and the graph path
//! routes rows through gathers so each branch formula only ever sees
//! points inside its own domain.

use crate::gradcore::tape::{stable_sigmoid, stable_softplus};
use crate::gradcore::{NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Shape of the spline family: bin count, tail bound, and the floors that
/// keep bins and slopes away from degeneracy.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    /// Number of bins `M_b` on `[−B, B]`.
    pub bins: usize,
    /// Half-width `B` of the spline interval; identity outside.
    pub tail_bound: f64,
    /// Lower bound for knot derivatives.
    pub min_derivative: f64,
    /// Lower bound for each bin's share of the interval.
    pub min_bin_fraction: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig { bins: 8, tail_bound: 5.0, min_derivative: 1e-3, min_bin_fraction: 1e-3 }
    }
}

impl SplineConfig {
    /// Raw parameters per variable: `M_b` widths, `M_b` heights, `M_b − 1`
    /// interior derivatives (the two boundary derivatives are pinned to 1),
    /// and `M_b` virtual-knot positions.
    pub fn raw_param_count(&self) -> usize {
        4 * self.bins - 1
    }

    /// Checks that the configuration describes a usable spline.
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Contract(format!("spline needs at least 2 bins, got {}", self.bins)));
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return Err(Error::Contract(format!("tail bound must be positive, got {}", self.tail_bound)));
        }
        if !(self.min_derivative > 0.0 && self.min_derivative < 1.0) {
            return Err(Error::Contract(format!(
                "minimum derivative must lie in (0, 1), got {}",
                self.min_derivative
            )));
        }
        if !(self.min_bin_fraction > 0.0 && self.min_bin_fraction * (self.bins as f64) < 1.0) {
            return Err(Error::Contract(format!(
                "minimum bin fraction {} infeasible for {} bins",
                self.min_bin_fraction, self.bins
            )));
        }
        Ok(())
    }

    /// Shift added to raw derivatives before the softplus, chosen so a raw
    /// value of 0 yields a derivative of exactly 1.
    fn derivative_shift(&self) -> f64 {
        // softplus⁻¹(1 − δ_min): softplus(x + this) + δ_min is 1 at x = 0.
        ((1.0 - self.min_derivative).exp() - 1.0).ln()
    }
}

/// Which branch of the piecewise map a point falls into.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Piece {
    /// Outside `[−B, B]`: identity.
    Tail,
    /// Bin `m`, left of the virtual knot.
    One(usize),
    /// Bin `m`, right of the virtual knot.
    Two(usize),
}

/// Knots of one variable's spline, with the derived per-bin weights.
///
/// `u` is the base-side axis and `v` the data-side axis: `forward` maps
/// `u → v` (sampling direction) and `inverse` maps `v → u` (density
/// direction). Both axes run over the same `[−B, B]` interval.
#[derive(Clone, Debug)]
pub struct SplineKnots {
    u: Vec<f64>,
    v: Vec<f64>,
    d: Vec<f64>,
    lambda: Vec<f64>,
    tail_bound: f64,
    // Derived per bin: the right-end weight, the virtual-knot weight, and
    // the virtual-knot value (left-end weight normalized to 1).
    alpha_r: Vec<f64>,
    abar: Vec<f64>,
    vbar: Vec<f64>,
}

impl SplineKnots {
    /// Builds knots from transformed parts; validates the invariants and
    /// precomputes per-bin weights.
    pub fn from_parts(
        u: Vec<f64>,
        v: Vec<f64>,
        d: Vec<f64>,
        lambda: Vec<f64>,
        tail_bound: f64,
    ) -> Result<SplineKnots> {
        let bins = lambda.len();
        if bins == 0 || u.len() != bins + 1 || v.len() != bins + 1 || d.len() != bins + 1 {
            return Err(Error::Contract(format!(
                "inconsistent knot lengths: u={}, v={}, d={}, lambda={}",
                u.len(),
                v.len(),
                d.len(),
                lambda.len()
            )));
        }
        for axis in [&u, &v] {
            if axis[0] != -tail_bound || axis[bins] != tail_bound {
                return Err(Error::Contract(format!(
                    "knot axis must span [−{tail_bound}, {tail_bound}], got [{}, {}]",
                    axis[0], axis[bins]
                )));
            }
            if axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Contract("knot axis is not strictly increasing".into()));
            }
        }
        if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Contract("knot derivatives must be positive and finite".into()));
        }
        if lambda.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Contract("virtual-knot positions must lie in (0, 1)".into()));
        }
        let mut knots = SplineKnots {
            u,
            v,
            d,
            lambda,
            tail_bound,
            alpha_r: vec![0.0; bins],
            abar: vec![0.0; bins],
            vbar: vec![0.0; bins],
        };
        for m in 0..bins {
            let (ar, abar, vbar) = derive_bin(
                knots.u[m],
                knots.u[m + 1],
                knots.v[m],
                knots.v[m + 1],
                knots.d[m],
                knots.d[m + 1],
                knots.lambda[m],
            );
            knots.alpha_r[m] = ar;
            knots.abar[m] = abar;
            knots.vbar[m] = vbar;
        }
        Ok(knots)
    }

    /// Builds knots from one variable's raw parameter vector.
    ///
    /// Layout: `M_b` width logits, `M_b` height logits, `M_b − 1` interior
    /// derivative logits, `M_b` virtual-knot logits.
    pub fn from_raw(raw: &[f64], cfg: &SplineConfig) -> Result<SplineKnots> {
        cfg.validate()?;
        if raw.len() != cfg.raw_param_count() {
            return Err(Error::Contract(format!(
                "expected {} raw spline parameters, got {}",
                cfg.raw_param_count(),
                raw.len()
            )));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite raw spline parameters".into()));
        }
        let bins = cfg.bins;
        let u = knot_axis(&raw[0..bins], cfg);
        let v = knot_axis(&raw[bins..2 * bins], cfg);
        let shift = cfg.derivative_shift();
        let mut d = Vec::with_capacity(bins + 1);
        d.push(1.0);
        for &x in &raw[2 * bins..3 * bins - 1] {
            d.push(stable_softplus(x + shift) + cfg.min_derivative);
        }
        d.push(1.0);
        let lambda: Vec<f64> = raw[3 * bins - 1..4 * bins - 1]
            .iter()
            .map(|&x| stable_sigmoid(x) * 0.95 + 0.025)
            .collect();
        SplineKnots::from_parts(u, v, d, lambda, cfg.tail_bound)
    }

    /// The identity spline: all-zero raw parameters.
    pub fn identity(cfg: &SplineConfig) -> Result<SplineKnots> {
        SplineKnots::from_raw(&vec![0.0; cfg.raw_param_count()], cfg)
    }

    /// Number of bins.
    pub fn bins(&self) -> usize {
        self.lambda.len()
    }

    /// Base-side knot positions.
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// Data-side knot positions.
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Knot derivatives.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Virtual-knot positions per bin.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    fn bin_of(axis: &[f64], x: f64) -> usize {
        // Largest m with axis[m] <= x, clamped to a valid bin index.
        let idx = axis.partition_point(|&k| k <= x);
        idx.saturating_sub(1).min(axis.len() - 2)
    }

    /// Branch of the inverse map that `y` (data side) falls into.
    fn locate_inverse(&self, y: f64) -> Piece {
        if y <= -self.tail_bound || y >= self.tail_bound {
            return Piece::Tail;
        }
        let m = Self::bin_of(&self.v, y);
        if y <= self.vbar[m] {
            Piece::One(m)
        } else {
            Piece::Two(m)
        }
    }

    /// Maps base-side `u` to data-side `y`, returning `(y, log dφ/du)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if x <= -self.tail_bound || x >= self.tail_bound {
            return (x, 0.0);
        }
        let m = Self::bin_of(&self.u, x);
        let (um, up) = (self.u[m], self.u[m + 1]);
        let (vm, vp) = (self.v[m], self.v[m + 1]);
        let (lam, ar, abar, vbar) = (self.lambda[m], self.alpha_r[m], self.abar[m], self.vbar[m]);
        let du = up - um;
        let t = (x - um) / du;
        if t <= lam {
            let den = (lam - t) + abar * t;
            let y = (vm * (lam - t) + abar * vbar * t) / den;
            let logd = (abar * lam * (vbar - vm)).ln() - 2.0 * den.ln() - du.ln();
            (y, logd)
        } else {
            let den = abar * (1.0 - t) + ar * (t - lam);
            let y = (abar * vbar * (1.0 - t) + ar * vp * (t - lam)) / den;
            let logd = (abar * ar * (1.0 - lam) * (vp - vbar)).ln() - 2.0 * den.ln() - du.ln();
            (y, logd)
        }
    }

    /// Maps data-side `y` back to base-side `u`, returning
    /// `(u, log dφ⁻¹/dy)`; the log-derivative is the negated forward one
    /// at the preimage.
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        match self.locate_inverse(y) {
            Piece::Tail => (y, 0.0),
            Piece::One(m) => {
                let (um, up) = (self.u[m], self.u[m + 1]);
                let vm = self.v[m];
                let (lam, abar, vbar) = (self.lambda[m], self.abar[m], self.vbar[m]);
                let du = up - um;
                // The piece is linear in t once cross-multiplied.
                let t = lam * (y - vm) / (abar * (vbar - y) + (y - vm));
                let den = (lam - t) + abar * t;
                let logd = (abar * lam * (vbar - vm)).ln() - 2.0 * den.ln() - du.ln();
                (um + t * du, -logd)
            }
            Piece::Two(m) => {
                let (um, up) = (self.u[m], self.u[m + 1]);
                let vp = self.v[m + 1];
                let (lam, ar, abar, vbar) =
                    (self.lambda[m], self.alpha_r[m], self.abar[m], self.vbar[m]);
                let du = up - um;
                let a = abar * (y - vbar);
                let b = ar * (vp - y);
                let t = (a + lam * b) / (a + b);
                let den = abar * (1.0 - t) + ar * (t - lam);
                let logd = (abar * ar * (1.0 - lam) * (vp - vbar)).ln() - 2.0 * den.ln() - du.ln();
                (um + t * du, -logd)
            }
        }
    }
}

/// Per-bin derived quantities with the left-end weight normalized to 1:
/// the right-end weight `α_r = √(Δ_m/Δ_{m+1})`, the virtual-knot weight
/// `ᾱ = (λΔ_m + (1−λ)Δ_{m+1}α_r)/s` with `s` the bin slope, and the
/// virtual-knot value `v̄ = ((1−λ)v_m + α_r λ v_{m+1})/((1−λ) + α_r λ)`.
/// These make the two pieces meet C¹ with slopes `Δ_m`, `Δ_{m+1}` at the
/// bin ends.
fn derive_bin(um: f64, up: f64, vm: f64, vp: f64, dm: f64, dp: f64, lam: f64) -> (f64, f64, f64) {
    let om = 1.0 - lam;
    let s = (vp - vm) / (up - um);
    let ar = (dm / dp).sqrt();
    let abar = (lam * dm + om * dp * ar) / s;
    let vbar = (om * vm + ar * lam * vp) / (om + ar * lam);
    (ar, abar, vbar)
}

/// Transforms one axis's width logits into knot positions: a softmax over
/// bins, floored at `min_bin_fraction`, accumulated across `[−B, B]`. The
/// end knots are pinned to exactly `±B`.
fn knot_axis(logits: &[f64], cfg: &SplineConfig) -> Vec<f64> {
    let bins = cfg.bins;
    let b = cfg.tail_bound;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let scale = 1.0 - bins as f64 * cfg.min_bin_fraction;
    let mut axis = Vec::with_capacity(bins + 1);
    axis.push(-b);
    let mut cum = 0.0;
    for e in exps.iter().take(bins - 1) {
        cum += e / total * scale + cfg.min_bin_fraction;
        axis.push(cum * 2.0 * b - b);
    }
    axis.push(b);
    axis
}

/// Applies each variable's spline in the sampling direction (base → data),
/// returning the outputs and the summed log-derivative. The Jacobian is
/// diagonal, so the total log-Jacobian is just the per-variable sum.
pub fn separable_forward(knots: &[SplineKnots], z: &[f64]) -> Result<(Vec<f64>, f64)> {
    if knots.len() != z.len() {
        return Err(Error::Contract(format!(
            "{} splines for {} variables",
            knots.len(),
            z.len()
        )));
    }
    let mut out = Vec::with_capacity(z.len());
    let mut logd = 0.0;
    for (k, &x) in knots.iter().zip(z) {
        let (y, l) = k.forward(x);
        out.push(y);
        logd += l;
    }
    Ok((out, logd))
}

/// Applies each variable's spline in the density direction (data → base),
/// returning the base points and the summed log-derivative of the inverse.
pub fn separable_inverse(knots: &[SplineKnots], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if knots.len() != y.len() {
        return Err(Error::Contract(format!(
            "{} splines for {} variables",
            knots.len(),
            y.len()
        )));
    }
    let mut out = Vec::with_capacity(y.len());
    let mut logd = 0.0;
    for (k, &x) in knots.iter().zip(y) {
        let (u, l) = k.inverse(x);
        out.push(u);
        logd += l;
    }
    Ok((out, logd))
}

/// Builds per-variable [`SplineKnots`] from encodings `h` (`[K, M]`) and
/// the shared projection `theta_flow` (`[M, 4·M_b − 1]`).
pub fn knots_from_codes(
    h: &Tensor,
    theta_flow: &Tensor,
    cfg: &SplineConfig,
) -> Result<Vec<SplineKnots>> {
    let raw = h.matmul(theta_flow)?;
    (0..raw.shape()[0]).map(|k| SplineKnots::from_raw(raw.row_slice(k), cfg)).collect()
}

/// Tape nodes holding all `K` variables' knot arrays.
#[derive(Clone, Copy, Debug)]
pub struct KnotNodes {
    /// Base-side knots, `[K, M_b + 1]`.
    pub u: NodeId,
    /// Data-side knots, `[K, M_b + 1]`.
    pub v: NodeId,
    /// Knot derivatives, `[K, M_b + 1]`.
    pub d: NodeId,
    /// Virtual-knot positions, `[K, M_b]`.
    pub lambda: NodeId,
}

/// Tape version of the raw-parameter → knots construction for all `K`
/// variables at once (`raw` is `[K, 4·M_b − 1]`). Mirrors
/// [`SplineKnots::from_raw`] exactly.
pub fn knots_graph(tape: &mut Tape, raw: NodeId, cfg: &SplineConfig) -> Result<KnotNodes> {
    cfg.validate()?;
    let [k, cols] = crate::gradcore::tensor::dims2(tape.value(raw))?;
    if cols != cfg.raw_param_count() {
        return Err(Error::Contract(format!(
            "expected {} raw spline parameters per variable, got {cols}",
            cfg.raw_param_count()
        )));
    }
    let bins = cfg.bins;
    let b = cfg.tail_bound;

    // Upper-triangular ones: matmul with it accumulates bin fractions.
    let mut tri = vec![0.0; bins * bins];
    for i in 0..bins {
        for j in i..bins {
            tri[i * bins + j] = 1.0;
        }
    }
    let tri = tape.constant(Tensor::new(vec![bins, bins], tri)?)?;
    let left = tape.constant(Tensor::full(&[k, 1], -b))?;
    let right = tape.constant(Tensor::full(&[k, 1], b))?;
    let ones = tape.constant(Tensor::full(&[k, 1], 1.0))?;

    let axis = |tape: &mut Tape, logits: NodeId| -> Result<NodeId> {
        let sm = tape.softmax_masked(logits, &vec![true; k * bins])?;
        let scaled = tape.scale(sm, 1.0 - bins as f64 * cfg.min_bin_fraction)?;
        let fracs = tape.add_const(scaled, cfg.min_bin_fraction)?;
        let cum = tape.matmul(fracs, tri)?;
        let interior_cols: Vec<usize> = (0..bins - 1).collect();
        let interior = tape.gather_cols(cum, &interior_cols)?;
        let spanned = tape.scale(interior, 2.0 * b)?;
        let interior = tape.add_const(spanned, -b)?;
        tape.concat(&[left, interior, right], 1)
    };

    let width_cols: Vec<usize> = (0..bins).collect();
    let height_cols: Vec<usize> = (bins..2 * bins).collect();
    let deriv_cols: Vec<usize> = (2 * bins..3 * bins - 1).collect();
    let lambda_cols: Vec<usize> = (3 * bins - 1..4 * bins - 1).collect();

    let width_logits = tape.gather_cols(raw, &width_cols)?;
    let u = axis(tape, width_logits)?;
    let height_logits = tape.gather_cols(raw, &height_cols)?;
    let v = axis(tape, height_logits)?;

    let deriv_logits = tape.gather_cols(raw, &deriv_cols)?;
    let shifted = tape.add_const(deriv_logits, cfg.derivative_shift())?;
    let soft = tape.softplus(shifted)?;
    let interior_d = tape.add_const(soft, cfg.min_derivative)?;
    let d = tape.concat(&[ones, interior_d, ones], 1)?;

    let lambda_logits = tape.gather_cols(raw, &lambda_cols)?;
    let sig = tape.sigmoid(lambda_logits)?;
    let scaled = tape.scale(sig, 0.95)?;
    let lambda = tape.add_const(scaled, 0.025)?;

    Ok(KnotNodes { u, v, d, lambda })
}

/// One branch group of the piecewise inverse: which rows, and which bin
/// each row falls into.
struct BranchGroup {
    rows: Vec<usize>,
    bins: Vec<usize>,
}

/// Tape version of the data → base transform for a column of `K` values:
/// returns `(z, log dφ⁻¹/dy)` as `[K, 1]` nodes.
///
/// Branches are selected from current tape values using the same
/// classification as [`SplineKnots::inverse`]; rows are routed through
/// gathers so every log/div in a branch formula stays inside its domain,
/// then stitched back into the original order.
pub fn inverse_graph(
    tape: &mut Tape,
    knots: &KnotNodes,
    y: NodeId,
    cfg: &SplineConfig,
) -> Result<(NodeId, NodeId)> {
    let [k, one] = crate::gradcore::tensor::dims2(tape.value(y))?;
    if one != 1 {
        return Err(Error::Contract(format!("inverse_graph expects a [K, 1] input, got {one} columns")));
    }
    let bins = cfg.bins;
    for (node, want) in [
        (knots.u, bins + 1),
        (knots.v, bins + 1),
        (knots.d, bins + 1),
        (knots.lambda, bins),
    ] {
        let [rows, cols] = crate::gradcore::tensor::dims2(tape.value(node))?;
        if rows != k || cols != want {
            return Err(Error::Contract(format!(
                "knot node is [{rows}, {cols}], expected [{k}, {want}]"
            )));
        }
    }

    // Classify every row against its own knots, using the same logic as
    // the value path so the two paths pick identical branches.
    let mut tail = Vec::new();
    let mut one_group = BranchGroup { rows: Vec::new(), bins: Vec::new() };
    let mut two_group = BranchGroup { rows: Vec::new(), bins: Vec::new() };
    {
        let u_vals = tape.value(knots.u);
        let v_vals = tape.value(knots.v);
        let d_vals = tape.value(knots.d);
        let l_vals = tape.value(knots.lambda);
        let y_vals = tape.value(y);
        for row in 0..k {
            let row_knots = SplineKnots::from_parts(
                u_vals.row_slice(row).to_vec(),
                v_vals.row_slice(row).to_vec(),
                d_vals.row_slice(row).to_vec(),
                l_vals.row_slice(row).to_vec(),
                cfg.tail_bound,
            )?;
            match row_knots.locate_inverse(y_vals.data()[row]) {
                Piece::Tail => tail.push(row),
                Piece::One(m) => {
                    one_group.rows.push(row);
                    one_group.bins.push(m);
                }
                Piece::Two(m) => {
                    two_group.rows.push(row);
                    two_group.bins.push(m);
                }
            }
        }
    }

    let mut order = Vec::with_capacity(k);
    let mut z_parts = Vec::new();
    let mut logd_parts = Vec::new();

    if !tail.is_empty() {
        let z = tape.gather_rows(y, &tail)?;
        let logd = tape.constant(Tensor::zeros(&[tail.len(), 1]))?;
        order.extend_from_slice(&tail);
        z_parts.push(z);
        logd_parts.push(logd);
    }

    for (group, is_piece_one) in [(&one_group, true), (&two_group, false)] {
        if group.rows.is_empty() {
            continue;
        }
        let upper: Vec<usize> = group.bins.iter().map(|&m| m + 1).collect();
        let u_g = tape.gather_rows(knots.u, &group.rows)?;
        let v_g = tape.gather_rows(knots.v, &group.rows)?;
        let d_g = tape.gather_rows(knots.d, &group.rows)?;
        let l_g = tape.gather_rows(knots.lambda, &group.rows)?;
        let y_g = tape.gather_rows(y, &group.rows)?;
        let um = tape.gather_elem(u_g, &group.bins)?;
        let up = tape.gather_elem(u_g, &upper)?;
        let vm = tape.gather_elem(v_g, &group.bins)?;
        let vp = tape.gather_elem(v_g, &upper)?;
        let dm = tape.gather_elem(d_g, &group.bins)?;
        let dp = tape.gather_elem(d_g, &upper)?;
        let lam = tape.gather_elem(l_g, &group.bins)?;

        // Shared per-bin quantities, mirroring derive_bin.
        let neg_lam = tape.neg(lam)?;
        let om = tape.add_const(neg_lam, 1.0)?;
        let du = tape.sub(up, um)?;
        let dv = tape.sub(vp, vm)?;
        let s = tape.div(dv, du)?;
        let ratio = tape.div(dm, dp)?;
        let ar = tape.sqrt(ratio)?;
        let lam_dm = tape.mul(lam, dm)?;
        let om_dp = tape.mul(om, dp)?;
        let om_dp_ar = tape.mul(om_dp, ar)?;
        let abar_num = tape.add(lam_dm, om_dp_ar)?;
        let abar = tape.div(abar_num, s)?;
        let ar_lam = tape.mul(ar, lam)?;
        let om_vm = tape.mul(om, vm)?;
        let ar_lam_vp = tape.mul(ar_lam, vp)?;
        let vbar_num = tape.add(om_vm, ar_lam_vp)?;
        let vbar_den = tape.add(om, ar_lam)?;
        let vbar = tape.div(vbar_num, vbar_den)?;
        let log_du = tape.log(du)?;

        let (theta, log_fwd) = if is_piece_one {
            // t = λ(y − v_m) / [ᾱ(v̄ − y) + (y − v_m)]
            let ym = tape.sub(y_g, vm)?;
            let vbar_y = tape.sub(vbar, y_g)?;
            let abar_vbar_y = tape.mul(abar, vbar_y)?;
            let theta_den = tape.add(abar_vbar_y, ym)?;
            let lam_ym = tape.mul(lam, ym)?;
            let theta = tape.div(lam_ym, theta_den)?;
            // log dφ/du = log(ᾱλ(v̄ − v_m)) − 2·log((λ−t) + ᾱt) − log Δu
            let abar_lam = tape.mul(abar, lam)?;
            let vbar_vm = tape.sub(vbar, vm)?;
            let num = tape.mul(abar_lam, vbar_vm)?;
            let log_num = tape.log(num)?;
            let lam_t = tape.sub(lam, theta)?;
            let abar_t = tape.mul(abar, theta)?;
            let den = tape.add(lam_t, abar_t)?;
            let log_den = tape.log(den)?;
            let two_log_den = tape.scale(log_den, 2.0)?;
            let diff = tape.sub(log_num, two_log_den)?;
            let log_fwd = tape.sub(diff, log_du)?;
            (theta, log_fwd)
        } else {
            // t = (a + λb)/(a + b), a = ᾱ(y − v̄), b = α_r(v_{m+1} − y)
            let y_vbar = tape.sub(y_g, vbar)?;
            let a = tape.mul(abar, y_vbar)?;
            let vp_y = tape.sub(vp, y_g)?;
            let b_term = tape.mul(ar, vp_y)?;
            let lam_b = tape.mul(lam, b_term)?;
            let num = tape.add(a, lam_b)?;
            let den = tape.add(a, b_term)?;
            let theta = tape.div(num, den)?;
            // log dφ/du = log(ᾱα_r(1−λ)(v_{m+1} − v̄)) − 2·log(ᾱ(1−t) + α_r(t−λ)) − log Δu
            let abar_ar = tape.mul(abar, ar)?;
            let abar_ar_om = tape.mul(abar_ar, om)?;
            let vp_vbar = tape.sub(vp, vbar)?;
            let num_d = tape.mul(abar_ar_om, vp_vbar)?;
            let log_num = tape.log(num_d)?;
            let neg_t = tape.neg(theta)?;
            let one_t = tape.add_const(neg_t, 1.0)?;
            let abar_one_t = tape.mul(abar, one_t)?;
            let t_lam = tape.sub(theta, lam)?;
            let ar_t_lam = tape.mul(ar, t_lam)?;
            let den = tape.add(abar_one_t, ar_t_lam)?;
            let log_den = tape.log(den)?;
            let two_log_den = tape.scale(log_den, 2.0)?;
            let diff = tape.sub(log_num, two_log_den)?;
            let log_fwd = tape.sub(diff, log_du)?;
            (theta, log_fwd)
        };
        let t_du = tape.mul(theta, du)?;
        let z = tape.add(um, t_du)?;
        let logd = tape.neg(log_fwd)?;
        order.extend_from_slice(&group.rows);
        z_parts.push(z);
        logd_parts.push(logd);
    }

    let z_cat = if z_parts.len() == 1 { z_parts[0] } else { tape.concat(&z_parts, 0)? };
    let logd_cat =
        if logd_parts.len() == 1 { logd_parts[0] } else { tape.concat(&logd_parts, 0)? };
    // Invert the grouping permutation so outputs line up with input rows.
    let mut restore = vec![0usize; k];
    for (pos, &row) in order.iter().enumerate() {
        restore[row] = pos;
    }
    let z = tape.gather_rows(z_cat, &restore)?;
    let logd = tape.gather_rows(logd_cat, &restore)?;
    Ok((z, logd))
}
