//! Moduli of continuity: the function class behind the weak monotonicity
//! condition, the truncated-entropy modulus `h`, and the Theta transform
//! used by the Bihari bound.
//!
//! Membership in the class is certified numerically on probe grids, never
//! proved: reports carry the witness points so a failure is reproducible.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

/// Arguments below this floor are treated as errors by the Theta transform;
/// the integrand `1/rho` blows up at 0.
pub const THETA_FLOOR: f64 = 1e-12;

/// Default bound that the divergence certification of condition (i) must
/// exceed before the Osgood integral is accepted as divergent.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e3;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A candidate modulus: nondecreasing, vanishing at 0, linear growth bound
/// `A`, locally bounded derivative away from 0.
#[derive(Clone)]
pub struct RhoFunction {
    name: String,
    eval: ScalarFn,
    derivative: Option<ScalarFn>,
    linear_bound_a: f64,
}

impl std::fmt::Debug for RhoFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RhoFunction")
            .field("name", &self.name)
            .field("linear_bound_a", &self.linear_bound_a)
            .finish()
    }
}

impl RhoFunction {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: Option<ScalarFn>,
        linear_bound_a: f64,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            derivative,
            linear_bound_a,
        }
    }

    /// `rho(x) = x`, the classical Gronwall modulus.
    pub fn identity() -> Self {
        Self::new("identity", |x| x, Some(Arc::new(|_| 1.0)), 1.0)
    }

    /// `rho(x) = slope * x`.
    pub fn linear(slope: f64) -> Self {
        let a = slope.max(1.0);
        Self::new(
            format!("linear:{slope}"),
            move |x| slope * x,
            Some(Arc::new(move |_| slope)),
            a,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn derivative(&self, x: f64) -> Option<f64> {
        self.derivative.as_ref().map(|d| d(x))
    }

    pub fn linear_bound_a(&self) -> f64 {
        self.linear_bound_a
    }

    /// Smallest constant satisfying the linear-growth bound on the probes,
    /// rounded up 5%.
    pub fn estimate_linear_bound(&self, probes: &[f64]) -> f64 {
        let raw = probes
            .iter()
            .map(|&x| self.eval(x) / (1.0 + x))
            .fold(0.0, f64::max);
        (raw * 1.05).max(1.0)
    }
}

/// Truncated-entropy modulus: `-x ln x` on `[0, delta]`, extended linearly
/// with the one-sided slope `-ln(delta) - 1` above `delta`.
pub fn make_h(delta: f64) -> Result<RhoFunction> {
    if !(delta > 0.0 && delta < (-1.0_f64).exp()) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, e^-1), got {delta}"
        )));
    }
    let slope = -delta.ln() - 1.0;
    let at_delta = -delta * delta.ln();
    let eval = move |x: f64| -> f64 {
        if x <= 0.0 {
            0.0
        } else if x <= delta {
            -x * x.ln()
        } else {
            slope * (x - delta) + at_delta
        }
    };
    let deriv = move |x: f64| -> f64 {
        if x <= 0.0 {
            f64::INFINITY
        } else if x <= delta {
            -x.ln() - 1.0
        } else {
            slope
        }
    };
    // h(x) <= h(delta) + slope * x, so max(1, slope, h(delta)) works as A
    let a = slope.max(at_delta).max(1.0);
    Ok(RhoFunction::new(
        format!("h:{delta}"),
        eval,
        Some(Arc::new(deriv)),
        a,
    ))
}

/// Parses a modulus preset: `identity`, `h:<delta>` or `linear:<slope>`.
pub fn rho_by_name(name: &str) -> Result<RhoFunction> {
    if name == "identity" {
        return Ok(RhoFunction::identity());
    }
    if let Some(rest) = name.strip_prefix("h:") {
        let delta: f64 = rest
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad delta in '{name}'")))?;
        return make_h(delta);
    }
    if let Some(rest) = name.strip_prefix("linear:") {
        let slope: f64 = rest
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad slope in '{name}'")))?;
        return Ok(RhoFunction::linear(slope));
    }
    Err(Error::InvalidArgument(format!("unknown rho preset '{name}'")))
}

/// Outcome of one membership condition, with a witness when violated.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub passed: bool,
    pub witness: Option<f64>,
    pub detail: String,
}

/// Sampled certification of class membership.
#[derive(Debug, Clone, Serialize)]
pub struct ClassSReport {
    pub rho_name: String,
    pub condition_positivity: ConditionReport,
    pub condition_divergence: ConditionReport,
    pub condition_linear_growth: ConditionReport,
    pub condition_derivative: ConditionReport,
    /// `(epsilon, partial integral from epsilon to 1)` rows backing the
    /// divergence call.
    pub divergence_table: Vec<(f64, f64)>,
    pub divergence_bound: f64,
}

impl ClassSReport {
    pub fn passed(&self) -> bool {
        self.condition_positivity.passed
            && self.condition_divergence.passed
            && self.condition_linear_growth.passed
            && self.condition_derivative.passed
    }

    /// First violated condition, if any.
    pub fn first_failure(&self) -> Option<(&'static str, &ConditionReport)> {
        [
            ("positivity", &self.condition_positivity),
            ("divergence", &self.condition_divergence),
            ("linear_growth", &self.condition_linear_growth),
            ("derivative", &self.condition_derivative),
        ]
        .into_iter()
        .find(|(_, r)| !r.passed)
    }
}

/// Certifies class membership on a probe grid.
///
/// Positivity, monotonicity, the linear-growth bound with the declared `A`
/// and the derivative bound are sampled on the probes. The Osgood
/// divergence of `int dx / rho` near 0 is certified by integrating from a
/// geometric epsilon ladder and extrapolating the tail: pass when the
/// projected total exceeds `divergence_bound`.
pub fn validate_class_s(
    rho: &RhoFunction,
    probe_grid: &[f64],
    divergence_bound: f64,
) -> ClassSReport {
    let mut probes: Vec<f64> = probe_grid.iter().copied().filter(|&x| x > 0.0).collect();
    probes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // (i) part one: rho(0) = 0 and rho > 0 on the probes, nondecreasing
    let mut positivity = ConditionReport {
        passed: true,
        witness: None,
        detail: "rho(0)=0, positive and nondecreasing on probes".into(),
    };
    if rho.eval(0.0).abs() > 0.0 {
        positivity = ConditionReport {
            passed: false,
            witness: Some(0.0),
            detail: format!("rho(0) = {} != 0", rho.eval(0.0)),
        };
    } else {
        let mut prev = 0.0_f64;
        for &x in &probes {
            let v = rho.eval(x);
            if v <= 0.0 {
                positivity = ConditionReport {
                    passed: false,
                    witness: Some(x),
                    detail: format!("rho({x}) = {v} <= 0"),
                };
                break;
            }
            if v < prev - 1e-12 * prev.abs().max(1.0) {
                positivity = ConditionReport {
                    passed: false,
                    witness: Some(x),
                    detail: format!("rho decreases at {x}"),
                };
                break;
            }
            prev = v;
        }
    }

    // (i) part two: divergence of the Osgood integral near 0
    let mut table = Vec::new();
    let mut divergence = ConditionReport {
        passed: false,
        witness: None,
        detail: String::new(),
    };
    if positivity.passed {
        let x0 = 1.0_f64.min(probes.last().copied().unwrap_or(1.0));
        let mut partial = 0.0;
        let mut increments: Vec<f64> = Vec::new();
        let mut hi = x0;
        for _ in 1..=60 {
            let lo = hi / 2.0;
            let inc = match adaptive_simpson(&|x| 1.0 / rho.eval(x), lo, hi, 1e-10) {
                Ok(v) => v,
                Err(_) => f64::INFINITY,
            };
            partial += inc;
            increments.push(inc);
            table.push((lo, partial));
            hi = lo;
        }
        // tail projection: per-rung increments with ratio ~ 1 - O(1/j) are
        // non-summable (harmonic or slower decay), so the ladder total is
        // projected to infinity; otherwise a geometric tail is added
        let rungs = increments.len();
        let tail = rungs.saturating_sub(10);
        let last = &increments[tail..];
        let ratio = last
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 1.0 })
            .fold(0.0, f64::max);
        let non_summable = 1.0 - 1.5 / rungs as f64;
        let projected = if ratio >= non_summable {
            f64::INFINITY
        } else {
            partial + last.last().unwrap() * ratio / (1.0 - ratio)
        };
        divergence = ConditionReport {
            passed: projected > divergence_bound,
            witness: if projected > divergence_bound {
                None
            } else {
                Some(projected)
            },
            detail: format!(
                "projected integral {projected:.4e} vs bound {divergence_bound:.1e} (tail ratio {ratio:.3})"
            ),
        };
    } else {
        divergence.detail = "skipped: positivity failed".into();
    }

    // (ii): declared linear-growth constant checked on probes
    let a = rho.linear_bound_a();
    let mut linear_growth = ConditionReport {
        passed: true,
        witness: None,
        detail: format!("rho(x) <= {a} (1 + x) on probes"),
    };
    for &x in &probes {
        if rho.eval(x) > a * (1.0 + x) * (1.0 + 1e-12) {
            linear_growth = ConditionReport {
                passed: false,
                witness: Some(x),
                detail: format!("rho({x}) = {} > {a}(1 + {x})", rho.eval(x)),
            };
            break;
        }
    }

    // (iii): derivative estimates on [c, inf) nonnegative and bounded
    let mut derivative = ConditionReport {
        passed: true,
        witness: None,
        detail: "finite, nonnegative difference quotients away from 0".into(),
    };
    let c = probes.first().copied().unwrap_or(1e-3);
    let x_max = probes.last().copied().unwrap_or(1.0);
    let m_c = match rho.derivative(c) {
        Some(d) if d.is_finite() => d.abs().max(1.0) * 4.0,
        _ => {
            // estimated local bound: max difference quotient near c, padded
            let step = c * 0.01;
            ((rho.eval(c + step) - rho.eval(c)) / step).abs().max(1.0) * 16.0
        }
    };
    let mut x = c;
    while x <= x_max {
        let step = (x * 1e-6).max(1e-9);
        let q = (rho.eval(x + step) - rho.eval(x)) / step;
        if !(q >= -1e-6 && q <= m_c) {
            derivative = ConditionReport {
                passed: false,
                witness: Some(x),
                detail: format!("difference quotient {q:.4e} at {x} outside [0, {m_c:.4e}]"),
            };
            break;
        }
        x *= 1.6;
    }

    ClassSReport {
        rho_name: rho.name().to_string(),
        condition_positivity: positivity,
        condition_divergence: divergence,
        condition_linear_growth: linear_growth,
        condition_derivative: derivative,
        divergence_table: table,
        divergence_bound,
    }
}

/// Default probe grid covering `(0, x_max]` densely including points near 0.
pub fn default_probe_grid(x_max: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut x = 1e-10;
    while x < x_max {
        grid.push(x);
        x *= 1.35;
    }
    grid.push(x_max);
    grid
}

/// The Theta transform of a modulus: signed integral of `1/rho` from 1.
#[derive(Debug, Clone)]
pub struct ThetaCalculus {
    rho: RhoFunction,
    tolerance: f64,
}

impl ThetaCalculus {
    pub fn new(rho: RhoFunction, tolerance: f64) -> Self {
        Self { rho, tolerance }
    }

    pub fn with_default_tolerance(rho: RhoFunction) -> Self {
        Self::new(rho, 1e-8)
    }

    pub fn rho(&self) -> &RhoFunction {
        &self.rho
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// `Theta(x)`: adaptive quadrature of `1/rho` on `[1, x]`, signed.
    pub fn theta(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) || x < THETA_FLOOR {
            return Err(Error::InvalidArgument(format!(
                "theta argument {x} below floor {THETA_FLOOR}"
            )));
        }
        let f = |u: f64| 1.0 / self.rho.eval(u);
        if x >= 1.0 {
            adaptive_simpson(&f, 1.0, x, self.tolerance)
        } else {
            Ok(-adaptive_simpson(&f, x, 1.0, self.tolerance)?)
        }
    }

    /// `Theta^{-1}(y)` by bracketing bisection to relative tolerance.
    pub fn theta_inverse(&self, y: f64) -> Result<f64> {
        let floor_val = self.theta(THETA_FLOOR * 1.0001)?;
        if y < floor_val {
            return Err(Error::OutOfRange {
                value: y,
                min: floor_val,
            });
        }
        let mut lo;
        let mut hi = 1.0;
        if y >= 0.0 {
            // expand upward until Theta(hi) >= y
            let mut f_hi = 0.0;
            while f_hi < y {
                hi *= 2.0;
                f_hi = self.theta(hi)?;
                if hi > 1e300 {
                    return Err(Error::Quadrature("theta_inverse bracket overflow".into()));
                }
            }
            lo = hi / 2.0;
        } else {
            // shrink downward until Theta(lo) <= y
            lo = 0.5;
            let mut f_lo = self.theta(lo)?;
            while f_lo > y {
                hi = lo;
                lo /= 2.0;
                if lo < THETA_FLOOR {
                    lo = THETA_FLOOR;
                    break;
                }
                f_lo = self.theta(lo)?;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.theta(mid)? < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo) <= 1e-13 * hi.abs().max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Adaptive Simpson quadrature with absolute tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol || (b - a) < 1e-14 * (a.abs() + b.abs()).max(1.0) {
            return Ok(left + right + delta / 15.0);
        }
        if depth == 0 {
            return Err(Error::Quadrature(format!(
                "max depth reached on [{a}, {b}], residual {delta:.3e}"
            )));
        }
        Ok(recurse(f, a, fa, m, fm, flm, left, tol / 2.0, depth - 1)?
            + recurse(f, m, fm, b, fb, frm, right, tol / 2.0, depth - 1)?)
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    if !(fa.is_finite() && fb.is_finite() && fm.is_finite()) {
        return Err(Error::Quadrature(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    let whole = simpson(a, fa, b, fb, fm);
    recurse(f, a, fa, b, fb, fm, whole, tol, 60)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_passes_validation() {
        let rho = RhoFunction::identity();
        let report = validate_class_s(&rho, &default_probe_grid(100.0), DEFAULT_DIVERGENCE_BOUND);
        assert!(report.passed(), "{:?}", report.first_failure());
        assert_eq!(rho.linear_bound_a(), 1.0);
    }

    #[test]
    fn sqrt_fails_divergence() {
        let rho = RhoFunction::new("sqrt", |x| x.sqrt(), None, 2.0);
        let report = validate_class_s(&rho, &default_probe_grid(100.0), DEFAULT_DIVERGENCE_BOUND);
        assert!(!report.condition_divergence.passed);
        assert_eq!(report.first_failure().unwrap().0, "divergence");
    }

    #[test]
    fn quadratic_fails_linear_growth() {
        // declared A comes from a small-range estimate; a wide probe grid
        // exposes the superlinear growth
        let rho = RhoFunction::new("square", |x| x * x, None, 2.0);
        let report = validate_class_s(&rho, &default_probe_grid(1e4), DEFAULT_DIVERGENCE_BOUND);
        assert!(!report.condition_linear_growth.passed);
        assert!(report.condition_linear_growth.witness.unwrap() > 2.0);
    }

    #[test]
    fn h_values_match_closed_form() {
        let h = make_h(0.1).unwrap();
        assert_abs_diff_eq!(h.eval(0.1), 0.1 * 10.0_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(h.derivative(0.2).unwrap(), 10.0_f64.ln() - 1.0, epsilon = 1e-12);
        assert_eq!(h.eval(0.0), 0.0);
        // continuity at the knee
        assert_abs_diff_eq!(h.eval(0.1 - 1e-12), h.eval(0.1 + 1e-12), epsilon = 1e-9);
    }

    #[test]
    fn h_rejects_bad_delta() {
        assert!(make_h(0.0).is_err());
        assert!(make_h(0.5).is_err());
        assert!(make_h(-0.1).is_err());
    }

    #[test]
    fn h_passes_validation() {
        let h = make_h(0.1).unwrap();
        let report = validate_class_s(&h, &default_probe_grid(100.0), DEFAULT_DIVERGENCE_BOUND);
        assert!(report.passed(), "{:?}", report.first_failure());
    }

    #[test]
    fn h_is_concave_on_probes() {
        let h = make_h(0.2).unwrap();
        let xs = default_probe_grid(10.0);
        for w in xs.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            // second difference on the (non-uniform) triple
            let slope_ab = (h.eval(b) - h.eval(a)) / (b - a);
            let slope_bc = (h.eval(c) - h.eval(b)) / (c - b);
            assert!(slope_bc <= slope_ab + 1e-9, "convex kink near {b}");
        }
    }

    #[test]
    fn theta_identity_is_log() {
        let calc = ThetaCalculus::with_default_tolerance(RhoFunction::identity());
        assert_abs_diff_eq!(calc.theta(std::f64::consts::E).unwrap(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(calc.theta(1.0).unwrap(), 0.0, epsilon = 1e-12);
        assert!(calc.theta(0.0).is_err());
        assert!(calc.theta(-1.0).is_err());
    }

    #[test]
    fn theta_h_matches_trapezoid_oracle() {
        let h = make_h(0.1).unwrap();
        let calc = ThetaCalculus::with_default_tolerance(h.clone());
        // independent fine-step trapezoid from 0.5 to 1
        let n = 4_000_000usize;
        let (a, b) = (0.5, 1.0);
        let step = (b - a) / n as f64;
        let mut acc = 0.5 * (1.0 / h.eval(a) + 1.0 / h.eval(b));
        for i in 1..n {
            acc += 1.0 / h.eval(a + step * i as f64);
        }
        let oracle = -(acc * step);
        assert_abs_diff_eq!(calc.theta(0.5).unwrap(), oracle, epsilon = 1e-6);
    }

    #[test]
    fn theta_inverse_closed_form() {
        let calc = ThetaCalculus::with_default_tolerance(RhoFunction::identity());
        // Theta^{-1}(Theta(c) + b) = c e^b for the identity modulus
        let got = calc
            .theta_inverse(calc.theta(2.0).unwrap() + 1.0)
            .unwrap();
        assert_abs_diff_eq!(got, 2.0 * std::f64::consts::E, epsilon = 1e-6);
        assert_abs_diff_eq!(calc.theta_inverse(0.0).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn theta_inverse_round_trip_h() {
        let calc = ThetaCalculus::with_default_tolerance(make_h(0.1).unwrap());
        let y = calc.theta(0.3).unwrap() + 0.7;
        let x = calc.theta_inverse(y).unwrap();
        let residual = (calc.theta(x).unwrap() - y).abs();
        assert!(residual < 2e-8, "residual {residual}");
    }

    #[test]
    fn theta_monotone() {
        let calc = ThetaCalculus::with_default_tolerance(make_h(0.1).unwrap());
        let probes = [0.01, 0.05, 0.2, 0.5, 1.0, 2.0, 7.0];
        for w in probes.windows(2) {
            assert!(calc.theta(w[0]).unwrap() < calc.theta(w[1]).unwrap());
        }
    }

    #[test]
    fn bihari_equals_gronwall_for_identity() {
        let calc = ThetaCalculus::new(RhoFunction::identity(), 1e-10);
        for (c, b) in [(0.5, 1.0), (2.0, 0.3), (0.05, 1.0)] {
            let bound = calc.theta_inverse(calc.theta(c).unwrap() + b).unwrap();
            assert_abs_diff_eq!(bound, c * b.exp(), epsilon = 1e-9);
        }
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(rho_by_name("identity").unwrap().name(), "identity");
        assert_eq!(rho_by_name("h:0.1").unwrap().name(), "h:0.1");
        assert_eq!(rho_by_name("linear:2").unwrap().name(), "linear:2");
        assert!(rho_by_name("h:0.9").is_err());
        assert!(rho_by_name("cubic").is_err());
    }
}
