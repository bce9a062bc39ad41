//! Drivers `g(omega, t, y, z)` with their structural certificates, the
//! shipped generator family, and the statistical checkers for the
//! monotonicity / Lipschitz / growth / continuity assumptions.
//!
//! Checkers are certifiers, not proofs: every report records the sample
//! count, radii and seed so a failure is reproducible, and carries a
//! witness point when a sampled inequality breaks.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::paths::{hitting_time, AdaptedProcess, PathEnsemble, StoppingTimeField};
use crate::sfuncs::{make_h, RhoFunction};

/// Absolute tolerance for the sampled inequality checks.
pub const CHECK_TOL: f64 = 1e-12;

/// Builds an ensemble-bound process (weight, forcing) from an ensemble.
pub type ProcessFactory = Arc<dyn Fn(&Arc<PathEnsemble>) -> AdaptedProcess + Send + Sync>;
type EvalFn = Arc<dyn Fn(&GenPoint, &[f64], &[f64], &mut [f64]) + Send + Sync>;
type ACertFn = Arc<dyn Fn(&PreparedGenerator) -> ACertificate + Send + Sync>;

/// Path-local state handed to a generator evaluation. Generators only ever
/// see history-measurable data (current Brownian value, precomputed weights
/// and forcing), never raw futures.
pub struct GenPoint<'a> {
    pub t: f64,
    pub node: usize,
    /// Brownian value, `d` components.
    pub b: &'a [f64],
    pub b_norm: f64,
    /// Raw monotonicity weight value at this point.
    pub u: f64,
    /// Lipschitz weight value at this point.
    pub v: f64,
    /// Forcing value (`k` components) or empty.
    pub forcing: &'a [f64],
}

/// A driver together with its certified structural data.
#[derive(Clone)]
pub struct GeneratorSpec {
    name: String,
    k: usize,
    z_dependent: bool,
    rho: RhoFunction,
    /// Constant absorbed into the raw weight so that the sampled
    /// monotonicity display holds with `rho`; 1 unless a modulus-algebra
    /// derivation requires more.
    h2_scale: f64,
    eval: EvalFn,
    u_factory: ProcessFactory,
    v_factory: ProcessFactory,
    forcing_factory: Option<ProcessFactory>,
    a_cert: ACertFn,
}

impl std::fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("name", &self.name)
            .field("k", &self.k)
            .field("z_dependent", &self.z_dependent)
            .field("h2_scale", &self.h2_scale)
            .finish()
    }
}

impl GeneratorSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn z_dependent(&self) -> bool {
        self.z_dependent
    }

    pub fn rho(&self) -> &RhoFunction {
        &self.rho
    }

    pub fn h2_scale(&self) -> f64 {
        self.h2_scale
    }

    /// Precomputes the weight, forcing and Brownian fields on an ensemble.
    pub fn prepare(&self, ensemble: &Arc<PathEnsemble>) -> PreparedGenerator {
        let brownian = ensemble.brownian();
        let b_norm = brownian.euclidean_norm();
        PreparedGenerator {
            spec: self.clone(),
            ensemble: Arc::clone(ensemble),
            u_raw: (self.u_factory)(ensemble),
            v: (self.v_factory)(ensemble),
            forcing: self.forcing_factory.as_ref().map(|f| f(ensemble)),
            brownian,
            b_norm,
        }
    }
}

/// A generator bound to a concrete ensemble, ready for evaluation.
pub struct PreparedGenerator {
    pub spec: GeneratorSpec,
    ensemble: Arc<PathEnsemble>,
    pub u_raw: AdaptedProcess,
    pub v: AdaptedProcess,
    pub forcing: Option<AdaptedProcess>,
    pub brownian: AdaptedProcess,
    pub b_norm: AdaptedProcess,
}

impl PreparedGenerator {
    pub fn ensemble(&self) -> &Arc<PathEnsemble> {
        &self.ensemble
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn d(&self) -> usize {
        self.ensemble.dim()
    }

    /// Evaluates `g` at `(path, node, y, z)` into `out` (`k` components).
    pub fn eval_into(&self, path: usize, node: usize, y: &[f64], z: &[f64], out: &mut [f64]) {
        let point = GenPoint {
            t: self.ensemble.grid().node(node),
            node,
            b: self.brownian.value(path, node),
            b_norm: self.b_norm.scalar(path, node),
            u: self.u_raw.scalar(path, node),
            v: self.v.scalar(path, node),
            forcing: self
                .forcing
                .as_ref()
                .map(|f| f.value(path, node))
                .unwrap_or(&[]),
        };
        (self.spec.eval)(&point, y, z, out);
    }

    /// The monotonicity weight with the derived constant folded in; this is
    /// the process the sampled display is certified against.
    pub fn certified_u(&self) -> AdaptedProcess {
        self.u_raw.scaled(self.spec.h2_scale)
    }

    /// Default candidate data for the inner-product growth check and the a
    /// priori estimates.
    pub fn a_certificate(&self) -> ACertificate {
        (self.spec.a_cert)(self)
    }
}

/// Candidate `(mu, kappa, lambda, f)` for the inner-product growth display.
pub struct ACertificate {
    pub kappa: RhoFunction,
    pub mu: AdaptedProcess,
    pub lambda: AdaptedProcess,
    pub f: AdaptedProcess,
}

/// `g = 0`.
pub fn make_zero(k: usize) -> GeneratorSpec {
    make_linear(k, 0.0, 0.0, None)
}

/// Resolves a registry name: `"zero"`, `"linear:a,b"`, or
/// `"example46:M,delta"` (the latter is always two-dimensional).
pub fn generator_by_name(name: &str, k: usize) -> Result<GeneratorSpec> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if name == "zero" {
        return Ok(make_zero(k));
    }
    let two_floats = |rest: &str| -> Result<(f64, f64)> {
        let mut it = rest.split(',');
        let a = it.next().and_then(|s| s.trim().parse().ok());
        let b = it.next().and_then(|s| s.trim().parse().ok());
        match (a, b, it.next()) {
            (Some(a), Some(b), None) => Ok((a, b)),
            _ => Err(Error::InvalidArgument(format!(
                "expected two comma-separated numbers, got {rest:?}"
            ))),
        }
    };
    if let Some(rest) = name.strip_prefix("linear:") {
        let (a, b) = two_floats(rest)?;
        return Ok(make_linear(k, a, b, None));
    }
    if let Some(rest) = name.strip_prefix("example46:") {
        let (m, delta) = two_floats(rest)?;
        let spec = make_example46(m, delta)?;
        if spec.k() != k {
            return Err(Error::InvalidArgument(format!(
                "example46 is {}-dimensional but k = {k} was requested",
                spec.k()
            )));
        }
        return Ok(spec);
    }
    Err(Error::InvalidArgument(format!(
        "unknown generator {name:?}"
    )))
}

/// `g(t, y, z) = a y + b (row sums of z) + forcing`, the closed-form oracle
/// family. Certificates: weight `|a|` with the identity modulus, Lipschitz
/// weight `|b| sqrt(d)`.
pub fn make_linear(k: usize, a: f64, b: f64, forcing: Option<ProcessFactory>) -> GeneratorSpec {
    let name = if a == 0.0 && b == 0.0 && forcing.is_none() {
        "zero".to_string()
    } else {
        format!("linear:{a},{b}")
    };
    let eval: EvalFn = Arc::new(move |point: &GenPoint, y: &[f64], z: &[f64], out: &mut [f64]| {
        let k = y.len();
        let d = if k > 0 { z.len() / k } else { 0 };
        for i in 0..k {
            let mut row_sum = 0.0;
            for c in 0..d {
                row_sum += z[i * d + c];
            }
            let forcing = if point.forcing.is_empty() {
                0.0
            } else {
                point.forcing[i]
            };
            out[i] = a * y[i] + b * row_sum + forcing;
        }
    });
    let abs_a = a.abs();
    let abs_b = b.abs();
    let has_forcing = forcing.is_some();
    let forcing_for_cert = forcing.clone();
    GeneratorSpec {
        name,
        k,
        z_dependent: b != 0.0,
        rho: RhoFunction::identity(),
        h2_scale: 1.0,
        eval,
        u_factory: Arc::new(move |e| AdaptedProcess::constant(e, abs_a)),
        v_factory: Arc::new(move |e| {
            AdaptedProcess::constant(e, abs_b * (e.dim() as f64).sqrt())
        }),
        forcing_factory: forcing,
        a_cert: Arc::new(move |prep: &PreparedGenerator| {
            let e = prep.ensemble();
            let f = if has_forcing {
                let raw = forcing_for_cert.as_ref().unwrap()(e);
                // |forcing| as a scalar process
                raw.euclidean_norm()
            } else {
                AdaptedProcess::constant(e, 0.0)
            };
            ACertificate {
                kappa: RhoFunction::identity(),
                mu: AdaptedProcess::constant(e, abs_a),
                lambda: AdaptedProcess::constant(e, abs_b * (e.dim() as f64).sqrt()),
                f,
            }
        }),
    }
}

/// The constant multiplying the entropy modulus when the two-component
/// coupling is reduced to the monotonicity display: the smallest constant
/// with `2 x h(x) <= c h(x^2)` on a wide probe grid, padded 5%.
fn entropy_coupling_constant(h: &RhoFunction) -> f64 {
    let mut sup: f64 = 1.0;
    let mut x = 1e-8;
    while x < 1e4 {
        let denom = h.eval(x * x);
        if denom > 0.0 {
            sup = sup.max(2.0 * x * h.eval(x) / denom);
        }
        x *= 1.02;
    }
    sup * 1.05
}

/// The two-component driver with entropy coupling, exponential own-component
/// damping, stopped Brownian weights and a Brownian forcing:
/// `g_i = u (h(|y_j|) - e^{y_i}) + v |z_j| + |B|` with `j` the other index.
///
/// The weights are `|B_t|` stopped at the budget-exhaustion times of
/// `int |B| ds` (level `M/2`) and `int |B|^2 ds` (level `M/2`).
pub fn make_example46(m_budget: f64, delta: f64) -> Result<GeneratorSpec> {
    if !(m_budget > 0.0) {
        return Err(Error::InvalidArgument("budget M must be positive".into()));
    }
    let h = make_h(delta)?;
    let h_for_eval = h.clone();
    let eval: EvalFn = Arc::new(move |point: &GenPoint, y: &[f64], z: &[f64], out: &mut [f64]| {
        debug_assert_eq!(y.len(), 2);
        let d = z.len() / 2;
        let row_norm = |i: usize| -> f64 {
            z[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        out[0] = point.u * (h_for_eval.eval(y[1].abs()) - y[0].exp())
            + point.v * row_norm(1)
            + point.b_norm;
        out[1] = point.u * (h_for_eval.eval(y[0].abs()) - y[1].exp())
            + point.v * row_norm(0)
            + point.b_norm;
    });
    let h2_scale = entropy_coupling_constant(&h);
    let level = m_budget / 2.0;
    let u_factory: ProcessFactory = Arc::new(move |e: &Arc<PathEnsemble>| {
        let speed = e.brownian().euclidean_norm();
        let tau = hitting_time(&speed, level, 1).expect("nonnegative integrand");
        stopped_weight(&speed, &tau)
    });
    let v_factory: ProcessFactory = Arc::new(move |e: &Arc<PathEnsemble>| {
        let speed = e.brownian().euclidean_norm();
        let tau = hitting_time(&speed, level, 2).expect("nonnegative integrand");
        stopped_weight(&speed, &tau)
    });
    let h_for_cert = h.clone();
    Ok(GeneratorSpec {
        name: format!("example46:{m_budget},{delta}"),
        k: 2,
        z_dependent: true,
        rho: h,
        h2_scale,
        eval,
        u_factory,
        v_factory,
        forcing_factory: None,
        a_cert: Arc::new(move |prep: &PreparedGenerator| {
            let e = prep.ensemble();
            let sqrt2 = std::f64::consts::SQRT_2;
            // <y, g> <= h2_scale u h(|y|^2) + v |y||z| + sqrt(2)(|B| + u)|y|
            let f = AdaptedProcess::from_path_fn(e, 1, |path, out| {
                for (node, slot) in out.iter_mut().enumerate() {
                    *slot = sqrt2
                        * (prep.b_norm.scalar(path, node) + prep.u_raw.scalar(path, node));
                }
            });
            ACertificate {
                kappa: h_for_cert.clone(),
                mu: prep.certified_u(),
                lambda: prep.v.clone(),
                f,
            }
        }),
    })
}

/// `weight_t = speed_t` while `node <= stop`, 0 after.
fn stopped_weight(speed: &AdaptedProcess, stop: &StoppingTimeField) -> AdaptedProcess {
    let stop_index = stop.stop_index().to_vec();
    AdaptedProcess::from_path_fn(speed.ensemble(), 1, |path, out| {
        let s = stop_index[path];
        for (node, slot) in out.iter_mut().enumerate() {
            *slot = if node <= s { speed.scalar(path, node) } else { 0.0 };
        }
    })
}

/// The stopped weights and stopping times behind the two-component driver,
/// exposed for budget audits.
pub struct Example46Fields {
    pub tau1: StoppingTimeField,
    pub tau2: StoppingTimeField,
    pub u_bar: AdaptedProcess,
    pub v_bar: AdaptedProcess,
}

pub fn example46_fields(ensemble: &Arc<PathEnsemble>, m_budget: f64) -> Result<Example46Fields> {
    let speed = ensemble.brownian().euclidean_norm();
    let tau1 = hitting_time(&speed, m_budget / 2.0, 1)?;
    let tau2 = hitting_time(&speed, m_budget / 2.0, 2)?;
    let u_bar = stopped_weight(&speed, &tau1);
    let v_bar = stopped_weight(&speed, &tau2);
    Ok(Example46Fields {
        tau1,
        tau2,
        u_bar,
        v_bar,
    })
}

/// Planted monotonicity counterexample: `g(y) = y^2` with a zero declared
/// weight (one component).
pub fn make_unmonotone_square() -> GeneratorSpec {
    GeneratorSpec {
        name: "counterexample:square".into(),
        k: 1,
        z_dependent: false,
        rho: RhoFunction::identity(),
        h2_scale: 1.0,
        eval: Arc::new(|_point, y, _z, out| out[0] = y[0] * y[0]),
        u_factory: Arc::new(|e| AdaptedProcess::constant(e, 0.0)),
        v_factory: Arc::new(|e| AdaptedProcess::constant(e, 0.0)),
        forcing_factory: None,
        a_cert: Arc::new(|prep| {
            let e = prep.ensemble();
            ACertificate {
                kappa: RhoFunction::identity(),
                mu: AdaptedProcess::constant(e, 0.0),
                lambda: AdaptedProcess::constant(e, 0.0),
                f: AdaptedProcess::constant(e, 0.0),
            }
        }),
    }
}

/// Planted continuity counterexample: `g(y) = sign(y)` (one component).
pub fn make_discontinuous_sign() -> GeneratorSpec {
    GeneratorSpec {
        name: "counterexample:sign".into(),
        k: 1,
        z_dependent: false,
        rho: RhoFunction::identity(),
        h2_scale: 1.0,
        eval: Arc::new(|_point, y, _z, out| {
            out[0] = if y[0] > 0.0 {
                1.0
            } else if y[0] < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        u_factory: Arc::new(|e| AdaptedProcess::constant(e, 1.0)),
        v_factory: Arc::new(|e| AdaptedProcess::constant(e, 0.0)),
        forcing_factory: None,
        a_cert: Arc::new(|prep| {
            let e = prep.ensemble();
            ACertificate {
                kappa: RhoFunction::identity(),
                mu: AdaptedProcess::constant(e, 0.0),
                lambda: AdaptedProcess::constant(e, 0.0),
                f: AdaptedProcess::constant(e, 1.0),
            }
        }),
    }
}

/// Witness of a violated sampled inequality.
#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub path: usize,
    pub node: usize,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

/// One assumption checker's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub samples: usize,
    pub violations: usize,
    /// Most negative slack `rhs - lhs` observed (negative means violated).
    pub worst_margin: f64,
    pub witness: Option<Witness>,
    pub seed: u64,
    pub passed: bool,
    pub detail: String,
}

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64, out: &mut [f64]) {
    let mut norm_sq = 0.0;
    for slot in out.iter_mut().take(dim) {
        let g: f64 = StandardNormal.sample(rng);
        *slot = g;
        norm_sq += g * g;
    }
    let norm = norm_sq.sqrt().max(1e-300);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    for slot in out.iter_mut().take(dim) {
        *slot *= r / norm;
    }
}

/// Sampled check of the monotonicity display
/// `<y1 - y2, g(y1, z) - g(y2, z)> <= u rho(|y1 - y2|^2)`.
pub fn check_h2(
    prep: &PreparedGenerator,
    n_samples: usize,
    y_radius: f64,
    z_radius: f64,
    seed: u64,
) -> CheckReport {
    let k = prep.k();
    let d = prep.d();
    let ensemble = prep.ensemble();
    let u = prep.certified_u();
    let rho = prep.spec.rho().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y1 = vec![0.0; k];
    let mut y2 = vec![0.0; k];
    let mut z = vec![0.0; k * d];
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for _ in 0..n_samples {
        let path = rng.random_range(0..ensemble.n_paths());
        let node = rng.random_range(0..ensemble.n_steps());
        sample_ball(&mut rng, k, y_radius, &mut y1);
        sample_ball(&mut rng, k, y_radius, &mut y2);
        sample_ball(&mut rng, k * d, z_radius, &mut z);
        prep.eval_into(path, node, &y1, &z, &mut g1);
        prep.eval_into(path, node, &y2, &z, &mut g2);
        let mut lhs = 0.0;
        let mut diff_sq = 0.0;
        for i in 0..k {
            let dy = y1[i] - y2[i];
            lhs += dy * (g1[i] - g2[i]);
            diff_sq += dy * dy;
        }
        let rhs = u.scalar(path, node) * rho.eval(diff_sq);
        let margin = rhs - lhs;
        if margin < worst {
            worst = margin;
        }
        if lhs > rhs + CHECK_TOL {
            violations += 1;
            if witness.is_none() {
                witness = Some(Witness {
                    path,
                    node,
                    y1: y1.clone(),
                    y2: y2.clone(),
                    z1: z.clone(),
                    z2: vec![],
                    lhs,
                    rhs,
                });
            }
        }
    }
    CheckReport {
        check: "H2".into(),
        samples: n_samples,
        violations,
        worst_margin: worst,
        witness,
        seed,
        passed: violations == 0,
        detail: format!("y_radius {y_radius}, z_radius {z_radius}, weight scale {}", prep.spec.h2_scale()),
    }
}

/// Sampled check of the Lipschitz display
/// `|g(y, z1) - g(y, z2)| <= v |z1 - z2|`.
pub fn check_h4(
    prep: &PreparedGenerator,
    n_samples: usize,
    z_radius: f64,
    seed: u64,
) -> CheckReport {
    let k = prep.k();
    let d = prep.d();
    let ensemble = prep.ensemble();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; k];
    let mut z1 = vec![0.0; k * d];
    let mut z2 = vec![0.0; k * d];
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for _ in 0..n_samples {
        let path = rng.random_range(0..ensemble.n_paths());
        let node = rng.random_range(0..ensemble.n_steps());
        sample_ball(&mut rng, k, 2.0, &mut y);
        sample_ball(&mut rng, k * d, z_radius, &mut z1);
        sample_ball(&mut rng, k * d, z_radius, &mut z2);
        prep.eval_into(path, node, &y, &z1, &mut g1);
        prep.eval_into(path, node, &y, &z2, &mut g2);
        let lhs = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dz = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rhs = prep.v.scalar(path, node) * dz;
        let margin = rhs - lhs;
        if margin < worst {
            worst = margin;
        }
        if lhs > rhs + CHECK_TOL {
            violations += 1;
            if witness.is_none() {
                witness = Some(Witness {
                    path,
                    node,
                    y1: y.clone(),
                    y2: vec![],
                    z1: z1.clone(),
                    z2: z2.clone(),
                    lhs,
                    rhs,
                });
            }
        }
    }
    CheckReport {
        check: "H4".into(),
        samples: n_samples,
        violations,
        worst_margin: worst,
        witness,
        seed,
        passed: violations == 0,
        detail: format!("z_radius {z_radius}"),
    }
}

/// One rung of the growth ladder: Monte Carlo estimate of the time integral
/// of `sup_{|y| <= r} |g(y, 0) - g(0, 0)|`.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthRung {
    pub radius: f64,
    pub estimate: f64,
    pub finite: bool,
}

/// Growth check: the inner supremum is approximated by a random net of 256
/// points plus the `2k` axis extremes, which captures exponential growth in
/// single coordinates.
pub fn check_h3(
    prep: &PreparedGenerator,
    r_ladder: &[f64],
    max_paths: usize,
    seed: u64,
) -> Vec<GrowthRung> {
    let k = prep.k();
    let d = prep.d();
    let ensemble = prep.ensemble();
    let grid = ensemble.grid();
    let n_paths = ensemble.n_paths().min(max_paths);
    let z0 = vec![0.0; k * d];
    let mut g = vec![0.0; k];
    let mut g0 = vec![0.0; k];
    let mut out = Vec::new();
    for &r in r_ladder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ r.to_bits());
        let mut net: Vec<Vec<f64>> = Vec::with_capacity(256 + 2 * k);
        for _ in 0..256 {
            let mut y = vec![0.0; k];
            sample_ball(&mut rng, k, r, &mut y);
            net.push(y);
        }
        for i in 0..k {
            for sign in [-1.0, 1.0] {
                let mut y = vec![0.0; k];
                y[i] = sign * r;
                net.push(y);
            }
        }
        let mut total = 0.0;
        for path in 0..n_paths {
            let mut integral = 0.0;
            for node in 0..grid.n_steps() {
                let y0 = vec![0.0; k];
                prep.eval_into(path, node, &y0, &z0, &mut g0);
                let mut psi: f64 = 0.0;
                for y in &net {
                    prep.eval_into(path, node, y, &z0, &mut g);
                    let dev = g
                        .iter()
                        .zip(&g0)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    psi = psi.max(dev);
                }
                integral += psi * grid.dt(node);
            }
            total += integral;
        }
        let estimate = total / n_paths as f64;
        out.push(GrowthRung {
            radius: r,
            estimate,
            finite: estimate.is_finite(),
        });
    }
    out
}

/// Continuity probe: the worst modulus `|g(y + eps dir) - g(y)|` must decay
/// as `eps` halves. Probe points concentrate near the origin (cube-mapped
/// sampling) so jump discontinuities there are hit.
pub fn check_h1(
    prep: &PreparedGenerator,
    n_samples: usize,
    perturbation_scale: f64,
    seed: u64,
) -> CheckReport {
    let k = prep.k();
    let d = prep.d();
    let ensemble = prep.ensemble();
    let n_scales = 13usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_scale = (n_samples / n_scales).max(1);
    let mut worst_per_scale = vec![0.0_f64; n_scales];
    let mut witness = None;
    let mut y = vec![0.0; k];
    let mut yp = vec![0.0; k];
    let mut dir = vec![0.0; k];
    let z = vec![0.0; k * d];
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    for (j, worst) in worst_per_scale.iter_mut().enumerate() {
        let eps = perturbation_scale * 0.5_f64.powi(j as i32);
        for _ in 0..per_scale {
            let path = rng.random_range(0..ensemble.n_paths());
            let node = rng.random_range(0..ensemble.n_steps());
            for slot in y.iter_mut() {
                let u: f64 = rng.random_range(-1.0..1.0);
                *slot = 2.0 * u * u * u; // concentrate near 0
            }
            sample_ball(&mut rng, k, 1.0, &mut dir);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            for (a, b) in yp.iter_mut().zip(y.iter().zip(&dir)) {
                *a = b.0 + eps * b.1 / norm;
            }
            prep.eval_into(path, node, &y, &z, &mut g1);
            prep.eval_into(path, node, &yp, &z, &mut g2);
            let modulus = g1
                .iter()
                .zip(&g2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if modulus > *worst {
                *worst = modulus;
                if j == n_scales - 1 {
                    witness = Some(Witness {
                        path,
                        node,
                        y1: y.clone(),
                        y2: yp.clone(),
                        z1: vec![],
                        z2: vec![],
                        lhs: modulus,
                        rhs: 0.0,
                    });
                }
            }
        }
    }
    let first = worst_per_scale[0];
    let last = worst_per_scale[n_scales - 1];
    let passed = last <= (0.05 * first).max(1e-8);
    CheckReport {
        check: "H1".into(),
        samples: per_scale * n_scales,
        violations: usize::from(!passed),
        worst_margin: (0.05 * first).max(1e-8) - last,
        witness: if passed { None } else { witness },
        seed,
        passed,
        detail: format!(
            "modulus ladder {:?} at scales {perturbation_scale} halving x{n_scales}",
            worst_per_scale
        ),
    }
}

/// Sampled check of the inner-product growth display
/// `<y, g(y, z)> <= mu kappa(|y|^2) + lambda |y| |z| + f |y|`.
pub fn check_a(
    prep: &PreparedGenerator,
    cert: &ACertificate,
    n_samples: usize,
    y_radius: f64,
    z_radius: f64,
    seed: u64,
) -> CheckReport {
    let k = prep.k();
    let d = prep.d();
    let ensemble = prep.ensemble();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; k];
    let mut z = vec![0.0; k * d];
    let mut g = vec![0.0; k];
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for _ in 0..n_samples {
        let path = rng.random_range(0..ensemble.n_paths());
        let node = rng.random_range(0..ensemble.n_steps());
        sample_ball(&mut rng, k, y_radius, &mut y);
        sample_ball(&mut rng, k * d, z_radius, &mut z);
        prep.eval_into(path, node, &y, &z, &mut g);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let y_norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        let z_norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rhs = cert.mu.scalar(path, node) * cert.kappa.eval(y_norm * y_norm)
            + cert.lambda.scalar(path, node) * y_norm * z_norm
            + cert.f.scalar(path, node) * y_norm;
        let margin = rhs - lhs;
        if margin < worst {
            worst = margin;
        }
        if lhs > rhs + CHECK_TOL {
            violations += 1;
            if witness.is_none() {
                witness = Some(Witness {
                    path,
                    node,
                    y1: y.clone(),
                    y2: vec![],
                    z1: z.clone(),
                    z2: vec![],
                    lhs,
                    rhs,
                });
            }
        }
    }
    CheckReport {
        check: "A".into(),
        samples: n_samples,
        violations,
        worst_margin: worst,
        witness,
        seed,
        passed: violations == 0,
        detail: format!("y_radius {y_radius}, z_radius {z_radius}"),
    }
}

/// One node of the non-domination table.
#[derive(Debug, Clone, Serialize)]
pub struct NondominationRow {
    pub t: f64,
    pub u_tilde: f64,
    /// The lower threshold any dominating deterministic weight must clear.
    pub threshold: f64,
    /// Empirical frequency of `weight_t > u_tilde_t`.
    pub violation_freq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NondominationReport {
    pub rows: Vec<NondominationRow>,
    /// Left-endpoint integral of the candidate over the grid.
    pub candidate_integral: f64,
    /// Nodes where the candidate sits below the threshold yet is exceeded
    /// by the stopped weight with positive frequency.
    pub witnessed_nodes: usize,
}

/// Path-counting probe of the domination argument: a deterministic
/// candidate below `M / (2t)` at some node is exceeded by the stopped
/// weight with positive probability there.
pub fn nondomination_probe(
    ensemble: &Arc<PathEnsemble>,
    m_budget: f64,
    candidate: &[f64],
) -> Result<NondominationReport> {
    let grid = ensemble.grid();
    let n = grid.n_steps();
    if candidate.len() != n + 1 {
        return Err(Error::InvalidArgument(format!(
            "candidate must have one value per node ({} expected)",
            n + 1
        )));
    }
    let fields = example46_fields(ensemble, m_budget)?;
    let n_paths = ensemble.n_paths();
    let mut rows = Vec::with_capacity(n);
    let mut witnessed = 0;
    let mut integral = 0.0;
    for node in 1..=n {
        let t = grid.node(node);
        let mut count = 0usize;
        for path in 0..n_paths {
            if fields.u_bar.scalar(path, node) > candidate[node] {
                count += 1;
            }
        }
        let freq = count as f64 / n_paths as f64;
        let threshold = m_budget / (2.0 * t);
        if candidate[node] < threshold && freq > 0.0 {
            witnessed += 1;
        }
        rows.push(NondominationRow {
            t,
            u_tilde: candidate[node],
            threshold,
            violation_freq: freq,
        });
    }
    for step in 0..n {
        integral += candidate[step] * grid.dt(step);
    }
    Ok(NondominationReport {
        rows,
        candidate_integral: integral,
        witnessed_nodes: witnessed,
    })
}
