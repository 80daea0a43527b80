//! Adaptive Simpson quadrature in one and two dimensions.
//!
//! This is the reference integrator behind every "does the analytic result
//! match the numerical integral" check: density normalization, marginal
//! consistency audits, and quadrature-marginalized likelihoods. It is kept
//! deliberately independent of the model code — it sees integrands only as
//! closures — so those checks cannot share a bug with the code under test.
//!
//! The interval is first cut into `initial_panels` equal panels and each
//! panel is refined adaptively. The generous default panel count exists to
//! catch narrow modes: plain adaptive Simpson started from a handful of
//! points can step over a spike without ever sampling it.

use crate::{Error, Result};

/// Tolerance and refinement limits for [`integrate`] / [`integrate2`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Absolute error target for the whole integral.
    pub tol: f64,
    /// Number of equal panels the interval is cut into before refinement.
    pub initial_panels: usize,
    /// Maximum refinement depth per panel before giving up.
    pub max_depth: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { tol: 1e-8, initial_panels: 64, max_depth: 32 }
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn eval<F: FnMut(f64) -> Result<f64>>(f: &mut F, x: f64) -> Result<f64> {
    let y = f(x)?;
    if !y.is_finite() {
        return Err(Error::Numerical(format!("integrand returned {y} at x = {x}")));
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: FnMut(f64) -> Result<f64>>(
    f: &mut F,
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(f, lm)?;
    let frm = eval(f, rm)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let diff = left + right - whole;
    if diff.abs() <= 15.0 * tol {
        // Richardson extrapolation of the two Simpson levels.
        return Ok(left + right + diff / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numerical(format!(
            "adaptive quadrature exceeded max depth near x = {m}"
        )));
    }
    let l = refine(f, a, lm, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = refine(f, m, rm, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}

/// Integrates `f` over `[a, b]` to the configured absolute tolerance.
///
/// Fails if the integrand returns a non-finite value, if the integrand
/// itself fails, or if a panel cannot reach the tolerance within
/// `max_depth` refinements.
pub fn integrate<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() || a >= b {
        return Err(Error::Contract(format!("invalid integration interval [{a}, {b}]")));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Contract(format!("quadrature tolerance must be > 0, got {}", cfg.tol)));
    }
    if cfg.initial_panels == 0 {
        return Err(Error::Contract("quadrature needs at least one initial panel".into()));
    }
    let panels = cfg.initial_panels;
    let width = (b - a) / panels as f64;
    let panel_tol = cfg.tol / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let pa = a + i as f64 * width;
        let pb = if i + 1 == panels { b } else { a + (i + 1) as f64 * width };
        let pm = 0.5 * (pa + pb);
        let fa = eval(&mut f, pa)?;
        let fm = eval(&mut f, pm)?;
        let fb = eval(&mut f, pb)?;
        let whole = simpson(pa, pb, fa, fm, fb);
        total += refine(&mut f, pa, pm, pb, fa, fm, fb, whole, panel_tol, cfg.max_depth)?;
    }
    Ok(total)
}

/// Integrates `f` over the rectangle `[ax, bx] × [ay, by]` by nesting
/// [`integrate`]: the inner (y) integrals are resolved to a tolerance 50×
/// tighter than the outer one so the outer refinement sees smooth values.
pub fn integrate2<F: FnMut(f64, f64) -> Result<f64>>(
    mut f: F,
    ax: f64,
    bx: f64,
    ay: f64,
    by: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    let inner_cfg = QuadratureConfig { tol: cfg.tol / 50.0, ..*cfg };
    integrate(|x| integrate(|y| f(x, y), ay, by, &inner_cfg), ax, bx, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
        let z = (x - mean) / std;
        (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn cubic_is_integrated_exactly() {
        let cfg = QuadratureConfig::default();
        let got = integrate(|x| Ok(x * x * x + x * x), 0.0, 1.0, &cfg).unwrap();
        assert!((got - (0.25 + 1.0 / 3.0)).abs() < 1e-14, "{got}");
    }

    #[test]
    fn standard_normal_mass_is_one() {
        let cfg = QuadratureConfig::default();
        let got = integrate(|x| Ok(normal_pdf(x, 0.0, 1.0)), -15.0, 15.0, &cfg).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn narrow_mode_inside_a_panel_is_still_captured() {
        // A σ=0.05 spike is much narrower than the default panel width of
        // ~0.47, so capturing it relies on the adaptive refinement.
        let cfg = QuadratureConfig::default();
        let got = integrate(|x| Ok(normal_pdf(x, 0.3, 0.05)), -15.0, 15.0, &cfg).unwrap();
        assert!((got - 1.0).abs() < 1e-6, "{got}");

        // Even narrower modes are handled by raising the panel count.
        let fine = QuadratureConfig { initial_panels: 256, ..cfg };
        let got = integrate(|x| Ok(normal_pdf(x, 0.3, 0.02)), -15.0, 15.0, &fine).unwrap();
        assert!((got - 1.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn sine_arch_has_area_two() {
        let cfg = QuadratureConfig::default();
        let got = integrate(|x| Ok(x.sin()), 0.0, std::f64::consts::PI, &cfg).unwrap();
        assert!((got - 2.0).abs() < 1e-10, "{got}");
    }

    #[test]
    fn rectangle_product_integral_is_exact() {
        let cfg = QuadratureConfig::default();
        let got = integrate2(|x, y| Ok(x * y), 0.0, 1.0, 0.0, 1.0, &cfg).unwrap();
        assert!((got - 0.25).abs() < 1e-12, "{got}");
    }

    #[test]
    fn correlated_gaussian_mass_is_one() {
        // pdf of N(0, [[1, 0.8], [0.8, 1]]), written out directly.
        let rho: f64 = 0.8;
        let det = 1.0 - rho * rho;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
        let pdf = move |x: f64, y: f64| {
            Ok(norm * (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * det)).exp())
        };
        let cfg = QuadratureConfig { tol: 1e-7, initial_panels: 32, max_depth: 32 };
        let got = integrate2(pdf, -10.0, 10.0, -10.0, 10.0, &cfg).unwrap();
        assert!((got - 1.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn integrand_errors_propagate() {
        let cfg = QuadratureConfig::default();
        let err = integrate(
            |x| {
                if x > 5.0 {
                    Err(Error::Domain("poles ahead".into()))
                } else {
                    Ok(x)
                }
            },
            0.0,
            10.0,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn non_finite_integrand_is_rejected() {
        let cfg = QuadratureConfig::default();
        let err = integrate(|x| Ok(1.0 / x), -1.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn unreachable_tolerance_fails_at_max_depth() {
        let cfg = QuadratureConfig { tol: 1e-300, initial_panels: 1, max_depth: 10 };
        let err = integrate(|x| Ok(x.sin()), 0.0, 1.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("max depth"), "{err}");
    }

    #[test]
    fn invalid_intervals_and_tolerances_are_contract_errors() {
        let cfg = QuadratureConfig::default();
        assert!(integrate(|_| Ok(1.0), 1.0, 0.0, &cfg).is_err());
        assert!(integrate(|_| Ok(1.0), 0.0, f64::INFINITY, &cfg).is_err());
        let bad = QuadratureConfig { tol: 0.0, ..cfg };
        assert!(integrate(|_| Ok(1.0), 0.0, 1.0, &bad).is_err());
    }
}
