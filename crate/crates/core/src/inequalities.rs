//! Empirical verification of the conditional Gronwall and Bihari bounds:
//! builds near-saturated instances of the hypothesis displays by backward
//! recursion, then checks the conclusion displays with independent
//! whole-tail conditional-expectation estimates.

use std::sync::Arc;

use serde::Serialize;

use crate::conditional::{regress_at_node, CondExpEstimator};
use crate::error::{Error, Result};
use crate::paths::{AdaptedProcess, PathEnsemble};
use crate::sfuncs::{RhoFunction, ThetaCalculus};

/// A process `mu` together with the data `(eta, beta, f, h)` of the
/// conditional linear-growth hypothesis it satisfies:
/// `mu_t <= E[eta + int_t^T (beta mu + f) ds | F_t]`.
pub struct GronwallInstance {
    pub mu: AdaptedProcess,
    /// Nonnegative terminal variable, one value per path.
    pub eta: Vec<f64>,
    pub beta: AdaptedProcess,
    pub f: AdaptedProcess,
    /// Extra nonnegative integrand of the strong-form hypothesis
    /// `E[sup mu + int h | F_t] <= E[eta + int (beta mu + f) | F_t]`.
    pub h: Option<AdaptedProcess>,
}

/// A process `mu` satisfying the modulus hypothesis
/// `mu_t <= c + E[int_t^T beta rho(mu) ds | F_t]`.
pub struct BihariInstance {
    pub c: f64,
    pub mu: AdaptedProcess,
    pub beta: AdaptedProcess,
    pub rho: RhoFunction,
}

fn require_nonneg(p: &AdaptedProcess, what: &str) -> Result<()> {
    if p.values().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} must be nonnegative and finite"
        )));
    }
    Ok(())
}

const GROWTH_CAP: f64 = 1e8;

/// Builds `mu` by the explicit backward recursion
/// `mu_i = (1 + beta_i dt) E[mu_{i+1} | F_i] + f_i dt`, `mu_n = eta`,
/// which satisfies the hypothesis display exactly in the discrete tower
/// sense and saturates it up to O(dt).
pub fn make_saturated_gronwall(
    ensemble: &Arc<PathEnsemble>,
    eta: Vec<f64>,
    beta: AdaptedProcess,
    f: AdaptedProcess,
    estimator: &CondExpEstimator,
) -> Result<GronwallInstance> {
    let n_paths = ensemble.n_paths();
    if eta.len() != n_paths {
        return Err(Error::InvalidArgument(
            "eta must hold one value per path".into(),
        ));
    }
    if eta.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "eta must be nonnegative and finite".into(),
        ));
    }
    require_nonneg(&beta, "beta")?;
    require_nonneg(&f, "f")?;
    let grid = ensemble.grid();
    let n = grid.n_steps();
    // stability guard: the compounded growth factor must stay bounded
    for path in 0..n_paths {
        let mut growth = 1.0_f64;
        for step in 0..n {
            growth *= 1.0 + beta.scalar(path, step) * grid.dt(step);
            if growth > GROWTH_CAP {
                return Err(Error::RecursionBlowUp {
                    step,
                    coeff: growth,
                });
            }
        }
    }
    let features = crate::conditional::default_state_features(ensemble);
    let n_nodes = n + 1;
    let mut mu_vals = vec![0.0; n_paths * n_nodes];
    let mut cur = eta.clone();
    for path in 0..n_paths {
        mu_vals[path * n_nodes + n] = eta[path];
    }
    for i in (0..n).rev() {
        let (mean, _) = regress_at_node(&features, i, &cur, 1, estimator)?;
        let dt = grid.dt(i);
        for path in 0..n_paths {
            let m = mean[path].max(0.0);
            let v = (1.0 + beta.scalar(path, i) * dt) * m + f.scalar(path, i) * dt;
            mu_vals[path * n_nodes + i] = v;
            cur[path] = v;
        }
    }
    Ok(GronwallInstance {
        mu: AdaptedProcess::from_values(ensemble, 1, mu_vals)?,
        eta,
        beta,
        f,
        h: None,
    })
}

/// One probe node of a hypothesis or conclusion check.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub node: usize,
    /// Path-max of the remaining `int beta ds` budget.
    pub budget_sup: f64,
    pub mu_mean: f64,
    pub bound_mean: f64,
    /// Fraction of paths with `mu <= bound + 3 se`.
    pub fraction: f64,
    pub worst_margin: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GronwallReport {
    pub hypothesis: Vec<ProbeRow>,
    pub conclusion: Vec<ProbeRow>,
    /// Strong-form rows (present when the instance carries `h`): the
    /// chain `mu <= E[sup mu + int h | F_t] <= bound`.
    pub strong: Vec<ProbeRow>,
}

impl GronwallReport {
    /// Worst conclusion/strong-form satisfaction fraction.
    pub fn min_fraction(&self) -> f64 {
        self.conclusion
            .iter()
            .chain(&self.strong)
            .map(|r| r.fraction)
            .fold(1.0, f64::min)
    }

    /// The instance saturates its hypothesis, so a per-path check sits at
    /// the estimator noise floor; certification is in the mean.
    pub fn hypothesis_certified(&self) -> bool {
        self.hypothesis.iter().all(|r| {
            r.bound_mean - r.mu_mean
                >= -(3.0 * r.standard_error + 1e-9 * (1.0 + r.bound_mean.abs()))
        })
    }

    /// Mean-margin certification of the conclusion and strong-form rows,
    /// for instances whose stochastic payloads keep a pathwise check at
    /// the estimator noise floor.
    pub fn conclusion_certified(&self) -> bool {
        self.conclusion.iter().chain(&self.strong).all(|r| {
            r.bound_mean - r.mu_mean
                >= -(3.0 * r.standard_error + 1e-9 * (1.0 + r.bound_mean.abs()))
        })
    }
}

fn tail_budget_sup(beta: &AdaptedProcess, from_node: usize) -> f64 {
    let ensemble = beta.ensemble();
    let grid = ensemble.grid();
    let mut sup = 0.0_f64;
    for path in 0..ensemble.n_paths() {
        let mut acc = 0.0;
        for step in from_node..grid.n_steps() {
            acc += beta.scalar(path, step) * grid.dt(step);
        }
        sup = sup.max(acc);
    }
    sup
}

fn probe_row(
    node: usize,
    budget_sup: f64,
    mu_at_node: &[f64],
    bound: &[f64],
    se: f64,
) -> ProbeRow {
    let n_paths = mu_at_node.len();
    let mut ok = 0usize;
    let mut worst = f64::INFINITY;
    let mut mu_sum = 0.0;
    let mut bound_sum = 0.0;
    for path in 0..n_paths {
        let margin = bound[path] - mu_at_node[path];
        worst = worst.min(margin);
        // the absolute term absorbs rounding when both sides coincide
        // exactly and the standard error vanishes
        if margin >= -(3.0 * se + 1e-9 * (1.0 + bound[path].abs())) {
            ok += 1;
        }
        mu_sum += mu_at_node[path];
        bound_sum += bound[path];
    }
    ProbeRow {
        node,
        budget_sup,
        mu_mean: mu_sum / n_paths as f64,
        bound_mean: bound_sum / n_paths as f64,
        fraction: ok as f64 / n_paths as f64,
        worst_margin: worst,
        standard_error: se,
    }
}

/// Checks the hypothesis display and the exponential-budget conclusion
/// `mu_t <= exp(|| int_t^T beta ds ||) E[eta + int_t^T f ds | F_t]`
/// at each probe node, plus the strong-form chain when `h` is present.
/// Conditional expectations use whole-tail payload regressions, which are
/// independent of the one-step recursion used in construction.
pub fn gronwall_check(
    inst: &GronwallInstance,
    estimator: &CondExpEstimator,
    probe_nodes: &[usize],
) -> Result<GronwallReport> {
    let ensemble = inst.mu.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let features = crate::conditional::default_state_features(ensemble);

    let mut hypothesis = Vec::new();
    let mut conclusion = Vec::new();
    let mut strong = Vec::new();
    for &node in probe_nodes {
        if node > n {
            return Err(Error::InvalidArgument(format!(
                "probe node {node} beyond the grid"
            )));
        }
        let budget = tail_budget_sup(&inst.beta, node);
        let mu_at: Vec<f64> = (0..n_paths).map(|p| inst.mu.scalar(p, node)).collect();

        // hypothesis payload: eta + sum_{j >= node} (beta mu + f) dt
        let mut hyp_payload = vec![0.0; n_paths];
        let mut con_payload = vec![0.0; n_paths];
        for path in 0..n_paths {
            let mut hp = inst.eta[path];
            let mut cp = inst.eta[path];
            for step in node..n {
                let dt = grid.dt(step);
                let f_v = inst.f.scalar(path, step) * dt;
                hp += inst.beta.scalar(path, step) * inst.mu.scalar(path, step) * dt + f_v;
                cp += f_v;
            }
            hyp_payload[path] = hp;
            con_payload[path] = cp;
        }
        // regress the margin payload - mu directly: the shared tail bias
        // of two separate fits would otherwise swamp the 3 se band
        let hyp_margin: Vec<f64> = (0..n_paths)
            .map(|p| hyp_payload[p] - mu_at[p])
            .collect();
        let (margin_cond, hyp_fit) =
            regress_at_node(&features, node, &hyp_margin, 1, estimator)?;
        let hyp_cond: Vec<f64> = (0..n_paths)
            .map(|p| mu_at[p] + margin_cond[p])
            .collect();
        let (con_cond, con_fit) = regress_at_node(&features, node, &con_payload, 1, estimator)?;
        hypothesis.push(probe_row(
            node,
            budget,
            &mu_at,
            &hyp_cond,
            hyp_fit.standard_error(0),
        ));
        let factor = budget.exp();
        let bound: Vec<f64> = con_cond.iter().map(|&v| factor * v.max(0.0)).collect();
        conclusion.push(probe_row(
            node,
            budget,
            &mu_at,
            &bound,
            factor * con_fit.standard_error(0),
        ));

        if let Some(h) = &inst.h {
            // middle term of the strong-form chain
            let mut mid_payload = vec![0.0; n_paths];
            for path in 0..n_paths {
                let mut sup = 0.0_f64;
                for m in node..=n {
                    sup = sup.max(inst.mu.scalar(path, m));
                }
                let mut acc = sup;
                for step in node..n {
                    acc += h.scalar(path, step) * grid.dt(step);
                }
                mid_payload[path] = acc;
            }
            let (mid_cond, mid_fit) =
                regress_at_node(&features, node, &mid_payload, 1, estimator)?;
            let se = mid_fit.standard_error(0) + factor * con_fit.standard_error(0);
            // both links: mu <= mid and mid <= bound, folded into one row
            // by taking the weaker margin per path
            let mut chain = vec![0.0; n_paths];
            for path in 0..n_paths {
                let lower = mid_cond[path] - mu_at[path];
                let upper = bound[path] - mid_cond[path];
                chain[path] = mu_at[path] + lower.min(upper);
            }
            strong.push(probe_row(node, budget, &mu_at, &chain, se));
        }
    }
    Ok(GronwallReport {
        hypothesis,
        conclusion,
        strong,
    })
}

/// Builds `mu` by the explicit backward recursion
/// `mu_i = m + beta_i dt rho(m)` with `m = c + E[mu_{i+1} - c | F_i]`,
/// `mu_n = c`. Monotonicity of `rho` keeps the discrete hypothesis
/// satisfied while staying within O(dt) of saturation.
pub fn make_saturated_bihari(
    ensemble: &Arc<PathEnsemble>,
    c: f64,
    beta: AdaptedProcess,
    rho: RhoFunction,
    estimator: &CondExpEstimator,
) -> Result<BihariInstance> {
    if c < 0.0 || !c.is_finite() {
        return Err(Error::InvalidArgument("c must be nonnegative".into()));
    }
    require_nonneg(&beta, "beta")?;
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let a = rho.linear_bound_a().max(1.0);
    for path in 0..n_paths {
        let mut growth = 1.0_f64;
        for step in 0..n {
            growth *= 1.0 + a * beta.scalar(path, step) * grid.dt(step);
            if growth > GROWTH_CAP {
                return Err(Error::RecursionBlowUp {
                    step,
                    coeff: growth,
                });
            }
        }
    }
    let features = crate::conditional::default_state_features(ensemble);
    let n_nodes = n + 1;
    let mut mu_vals = vec![0.0; n_paths * n_nodes];
    let mut cur = vec![0.0; n_paths];
    for path in 0..n_paths {
        mu_vals[path * n_nodes + n] = c;
    }
    for i in (0..n).rev() {
        let dt = grid.dt(i);
        let mean: Vec<f64> = if i == n - 1 {
            vec![0.0; n_paths]
        } else {
            let (m, _) = regress_at_node(&features, i, &cur, 1, estimator)?;
            m
        };
        for path in 0..n_paths {
            let m = c + mean[path].max(0.0);
            let v = m + beta.scalar(path, i) * dt * rho.eval(m);
            mu_vals[path * n_nodes + i] = v;
            cur[path] = v - c;
        }
    }
    Ok(BihariInstance {
        c,
        mu: AdaptedProcess::from_values(ensemble, 1, mu_vals)?,
        beta,
        rho,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BihariProbeRow {
    pub node: usize,
    pub budget_sup: f64,
    /// `Theta^{-1}(Theta(c) + budget)`, absent in the degenerate `c = 0`
    /// case where the conclusion is `mu = 0`.
    pub bound: Option<f64>,
    pub mu_max: f64,
    pub mu_mean: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BihariReport {
    pub degenerate: bool,
    pub probes: Vec<BihariProbeRow>,
    pub hypothesis: Vec<ProbeRow>,
}

impl BihariReport {
    pub fn all_satisfied(&self) -> bool {
        self.probes.iter().all(|p| p.satisfied) && self.hypothesis_certified()
    }

    /// Mean-margin certification; see `GronwallReport::hypothesis_certified`.
    pub fn hypothesis_certified(&self) -> bool {
        self.hypothesis.iter().all(|r| {
            r.bound_mean - r.mu_mean
                >= -(3.0 * r.standard_error + 1e-9 * (1.0 + r.bound_mean.abs()))
        })
    }
}

/// Checks the modulus hypothesis and the deterministic conclusion bound
/// `mu_t <= Theta^{-1}(Theta(c) + || int_t^T beta ds ||)` at each probe
/// node; for `c = 0` the conclusion is `mu = 0` up to `zero_tol`.
pub fn bihari_check(
    inst: &BihariInstance,
    estimator: &CondExpEstimator,
    probe_nodes: &[usize],
    zero_tol: f64,
) -> Result<BihariReport> {
    let ensemble = inst.mu.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let features = crate::conditional::default_state_features(ensemble);
    let theta = ThetaCalculus::with_default_tolerance(inst.rho.clone());
    let degenerate = inst.c == 0.0;

    let mut probes = Vec::new();
    let mut hypothesis = Vec::new();
    for &node in probe_nodes {
        if node > n {
            return Err(Error::InvalidArgument(format!(
                "probe node {node} beyond the grid"
            )));
        }
        let budget = tail_budget_sup(&inst.beta, node);
        let mu_at: Vec<f64> = (0..n_paths).map(|p| inst.mu.scalar(p, node)).collect();
        let mu_max = mu_at.iter().cloned().fold(0.0, f64::max);
        let mu_mean = mu_at.iter().sum::<f64>() / n_paths as f64;

        let (bound, satisfied) = if degenerate {
            (None, mu_max <= zero_tol)
        } else {
            let b = theta.theta_inverse(theta.theta(inst.c)? + budget)?;
            // the construction saturates from below; a small relative
            // slack absorbs quadrature error in Theta
            (Some(b), mu_max <= b * (1.0 + 1e-9) + zero_tol)
        };
        probes.push(BihariProbeRow {
            node,
            budget_sup: budget,
            bound,
            mu_max,
            mu_mean,
            satisfied,
        });

        let mut hyp_payload = vec![0.0; n_paths];
        for path in 0..n_paths {
            let mut acc = inst.c;
            for step in node..n {
                acc += inst.beta.scalar(path, step)
                    * inst.rho.eval(inst.mu.scalar(path, step))
                    * grid.dt(step);
            }
            hyp_payload[path] = acc;
        }
        let hyp_margin: Vec<f64> = (0..n_paths)
            .map(|p| hyp_payload[p] - mu_at[p])
            .collect();
        let (margin_cond, hyp_fit) =
            regress_at_node(&features, node, &hyp_margin, 1, estimator)?;
        let hyp_cond: Vec<f64> = (0..n_paths)
            .map(|p| mu_at[p] + margin_cond[p])
            .collect();
        hypothesis.push(probe_row(
            node,
            budget,
            &mu_at,
            &hyp_cond,
            hyp_fit.standard_error(0),
        ));
    }
    Ok(BihariReport {
        degenerate,
        probes,
        hypothesis,
    })
}

/// Conditional-remainder diagnostic of the martingale `E[eta | F_t]`:
/// the path max over probe nodes of `E[eta^2 | F_t] - E[eta | F_t]^2`,
/// which the square of the bound on `eta` dominates.
#[derive(Debug, Clone, Serialize)]
pub struct BmoReport {
    /// Empirical bound on `|eta|`.
    pub m_hat: f64,
    pub diagnostic: f64,
    pub per_node_max: Vec<(usize, f64)>,
}

pub fn bmo_diagnostic(
    ensemble: &Arc<PathEnsemble>,
    eta: &[f64],
    estimator: &CondExpEstimator,
    probe_nodes: &[usize],
) -> Result<BmoReport> {
    let n_paths = ensemble.n_paths();
    if eta.len() != n_paths {
        return Err(Error::InvalidArgument(
            "eta must hold one value per path".into(),
        ));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("eta must be bounded".into()));
    }
    let m_hat = eta.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let features = crate::conditional::default_state_features(ensemble);
    let eta_sq: Vec<f64> = eta.iter().map(|&v| v * v).collect();
    let mut per_node_max = Vec::new();
    let mut diagnostic = 0.0_f64;
    for &node in probe_nodes {
        let (e1, _) = regress_at_node(&features, node, eta, 1, estimator)?;
        let (e2, _) = regress_at_node(&features, node, &eta_sq, 1, estimator)?;
        let mut node_max = 0.0_f64;
        for path in 0..n_paths {
            let remainder = (e2[path] - e1[path] * e1[path]).max(0.0);
            node_max = node_max.max(remainder);
        }
        per_node_max.push((node, node_max));
        diagnostic = diagnostic.max(node_max);
    }
    Ok(BmoReport {
        m_hat,
        diagnostic,
        per_node_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::example46_fields;
    use crate::paths::{simulate_brownian, TimeGrid};
    use crate::sfuncs::make_h;

    fn ens(n_steps: usize, n_paths: usize, seed: u64) -> Arc<PathEnsemble> {
        let grid = TimeGrid::uniform(1.0, n_steps).unwrap();
        simulate_brownian(&grid, n_paths, 1, seed).unwrap()
    }

    #[test]
    fn gronwall_deterministic_saturation() {
        // beta = b, f = 0, eta = c gives mu_t near c e^{b(T-t)} and the
        // conclusion bound with margin O(dt)
        let e = ens(100, 500, 40);
        let est = CondExpEstimator::default();
        let b = 0.5;
        let c = 2.0;
        let inst = make_saturated_gronwall(
            &e,
            vec![c; e.n_paths()],
            AdaptedProcess::constant(&e, b),
            AdaptedProcess::constant(&e, 0.0),
            &est,
        )
        .unwrap();
        let mu0 = inst.mu.scalar(0, 0);
        let exact = c * (b * 1.0_f64).exp();
        assert!((mu0 - exact).abs() < 0.02 * exact, "mu0 {mu0} vs {exact}");
        let rep = gronwall_check(&inst, &est, &[0, 25, 50, 75]).unwrap();
        assert_eq!(rep.min_fraction(), 1.0);
        // near-saturation: mean margin small relative to the bound
        for row in &rep.conclusion {
            assert!(
                row.bound_mean - row.mu_mean < 0.02 * row.bound_mean,
                "slack too large at node {}: {} vs {}",
                row.node,
                row.mu_mean,
                row.bound_mean
            );
        }
    }

    #[test]
    fn gronwall_pure_integral_case() {
        // beta = 0, f = 1, eta = 0 gives mu_t = T - t exactly
        let e = ens(50, 300, 41);
        let est = CondExpEstimator::default();
        let inst = make_saturated_gronwall(
            &e,
            vec![0.0; e.n_paths()],
            AdaptedProcess::constant(&e, 0.0),
            AdaptedProcess::constant(&e, 1.0),
            &est,
        )
        .unwrap();
        let grid = e.grid();
        for node in [0, 10, 25, 49] {
            let expect = 1.0 - grid.node(node);
            for p in 0..e.n_paths() {
                assert!((inst.mu.scalar(p, node) - expect).abs() < 1e-9);
            }
        }
        let rep = gronwall_check(&inst, &est, &[0, 20, 40]).unwrap();
        assert_eq!(rep.min_fraction(), 1.0);
    }

    #[test]
    fn gronwall_strong_form_with_zero_h() {
        let e = ens(50, 300, 42);
        let est = CondExpEstimator::default();
        let mut inst = make_saturated_gronwall(
            &e,
            vec![1.0; e.n_paths()],
            AdaptedProcess::constant(&e, 0.3),
            AdaptedProcess::constant(&e, 0.1),
            &est,
        )
        .unwrap();
        inst.h = Some(AdaptedProcess::constant(&e, 0.0));
        let rep = gronwall_check(&inst, &est, &[0, 15, 30]).unwrap();
        assert_eq!(rep.strong.len(), 3);
        assert_eq!(rep.min_fraction(), 1.0);
    }

    #[test]
    fn gronwall_random_coefficient_instance() {
        // beta from the stopped |B| weight, eta = |B_T|
        let e = ens(60, 2000, 43);
        let est = CondExpEstimator::default();
        let fields = example46_fields(&e, 1.0).unwrap();
        let b = e.brownian();
        let n = e.n_steps();
        let eta: Vec<f64> = (0..e.n_paths()).map(|p| b.scalar(p, n).abs()).collect();
        let inst = make_saturated_gronwall(
            &e,
            eta,
            fields.u_bar.clone(),
            AdaptedProcess::constant(&e, 0.0),
            &est,
        )
        .unwrap();
        let rep = gronwall_check(&inst, &est, &[0, 20, 40]).unwrap();
        assert!(rep.hypothesis_certified(), "{:#?}", rep.hypothesis);
        assert!(rep.min_fraction() >= 0.99, "{:#?}", rep.conclusion);
    }

    #[test]
    fn gronwall_rejects_negative_inputs() {
        let e = ens(10, 20, 44);
        let est = CondExpEstimator::default();
        assert!(make_saturated_gronwall(
            &e,
            vec![-1.0; e.n_paths()],
            AdaptedProcess::constant(&e, 0.0),
            AdaptedProcess::constant(&e, 0.0),
            &est,
        )
        .is_err());
        assert!(make_saturated_gronwall(
            &e,
            vec![1.0; e.n_paths()],
            AdaptedProcess::constant(&e, -0.5),
            AdaptedProcess::constant(&e, 0.0),
            &est,
        )
        .is_err());
    }

    #[test]
    fn gronwall_blowup_reported() {
        let e = ens(10, 20, 45);
        let est = CondExpEstimator::default();
        let out = make_saturated_gronwall(
            &e,
            vec![1.0; e.n_paths()],
            AdaptedProcess::constant(&e, 1e4),
            AdaptedProcess::constant(&e, 0.0),
            &est,
        );
        assert!(matches!(out, Err(Error::RecursionBlowUp { .. })));
    }

    #[test]
    fn bihari_identity_modulus_matches_gronwall() {
        // rho(x) = x: the modulus bound collapses to c e^{||int beta||}
        let e = ens(80, 400, 46);
        let est = CondExpEstimator::default();
        let c = 0.7;
        let beta = AdaptedProcess::constant(&e, 0.9);
        let inst =
            make_saturated_bihari(&e, c, beta, RhoFunction::identity(), &est).unwrap();
        let rep = bihari_check(&inst, &est, &[0, 20, 40, 60], 1e-9).unwrap();
        assert!(rep.all_satisfied(), "{:#?}", rep.probes);
        let grid = e.grid();
        for row in &rep.probes {
            let closed = c * (0.9 * (1.0 - grid.node(row.node))).exp();
            let bound = row.bound.unwrap();
            assert!(
                (bound - closed).abs() < 1e-6 * closed.max(1.0),
                "node {}: {} vs {}",
                row.node,
                bound,
                closed
            );
        }
    }

    #[test]
    fn bihari_degenerate_c_zero() {
        let e = ens(50, 300, 47);
        let est = CondExpEstimator::default();
        let inst = make_saturated_bihari(
            &e,
            0.0,
            AdaptedProcess::constant(&e, 1.0),
            make_h(0.1).unwrap(),
            &est,
        )
        .unwrap();
        let rep = bihari_check(&inst, &est, &[0, 10, 25, 40], 1e-6).unwrap();
        assert!(rep.degenerate);
        assert!(rep.all_satisfied(), "{:#?}", rep.probes);
    }

    #[test]
    fn bihari_entropy_modulus_vs_ode_oracle() {
        // deterministic beta = 1, c = 0.05, rho = truncated entropy: the
        // quadrature bound must agree with a fine RK4 solve of the
        // saturation equation mu' = -beta rho(mu), mu(T) = c
        let e = ens(200, 200, 48);
        let est = CondExpEstimator::default();
        let c = 0.05;
        let rho = make_h(0.1).unwrap();
        let inst = make_saturated_bihari(
            &e,
            c,
            AdaptedProcess::constant(&e, 1.0),
            rho.clone(),
            &est,
        )
        .unwrap();
        let rep = bihari_check(&inst, &est, &[0], 1e-9).unwrap();
        let bound = rep.probes[0].bound.unwrap();

        let steps = 200_000usize;
        let dt = 1.0 / steps as f64;
        let mut mu = c;
        // integrate backward from T to 0; growth direction is +rho(mu)
        for _ in 0..steps {
            let k1 = rho.eval(mu);
            let k2 = rho.eval(mu + 0.5 * dt * k1);
            let k3 = rho.eval(mu + 0.5 * dt * k2);
            let k4 = rho.eval(mu + dt * k3);
            mu += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!(
            (bound - mu).abs() < 1e-4 * mu.max(1.0),
            "quadrature {bound} vs ODE {mu}"
        );
        // the constructed process saturates the bound from below
        assert!(rep.probes[0].satisfied);
        assert!(rep.probes[0].mu_max > 0.9 * bound, "{:#?}", rep.probes);
    }

    #[test]
    fn bihari_bound_monotone_in_beta_and_c() {
        let e = ens(40, 100, 49);
        let est = CondExpEstimator::default();
        let rho = make_h(0.1).unwrap();
        let mut prev_bound = 0.0;
        for (c, b) in [(0.01, 0.5), (0.01, 1.0), (0.05, 1.0), (0.2, 1.0), (0.2, 2.0)] {
            let inst = make_saturated_bihari(
                &e,
                c,
                AdaptedProcess::constant(&e, b),
                rho.clone(),
                &est,
            )
            .unwrap();
            let rep = bihari_check(&inst, &est, &[0], 1e-9).unwrap();
            let bound = rep.probes[0].bound.unwrap();
            assert!(bound >= prev_bound, "bound not monotone: {bound}");
            prev_bound = bound;
        }
    }

    #[test]
    fn bihari_bound_continuous_in_c() {
        let e = ens(20, 50, 50);
        let est = CondExpEstimator::default();
        let rho = make_h(0.1).unwrap();
        let beta = AdaptedProcess::constant(&e, 1.0);
        let cs = [0.02, 0.021, 0.022, 0.023];
        let bounds: Vec<f64> = cs
            .iter()
            .map(|&c| {
                let inst =
                    make_saturated_bihari(&e, c, beta.clone(), rho.clone(), &est).unwrap();
                bihari_check(&inst, &est, &[0], 1e-9).unwrap().probes[0]
                    .bound
                    .unwrap()
            })
            .collect();
        for w in bounds.windows(2) {
            assert!(w[1] >= w[0]);
            assert!(w[1] - w[0] < 0.1, "jump in c-ladder: {bounds:?}");
        }
    }

    #[test]
    fn bmo_constant_eta_is_zero() {
        let e = ens(30, 500, 51);
        let est = CondExpEstimator::default();
        let rep =
            bmo_diagnostic(&e, &vec![2.5; e.n_paths()], &est, &[0, 10, 20]).unwrap();
        assert_eq!(rep.m_hat, 2.5);
        assert!(rep.diagnostic < 1e-9, "diag {}", rep.diagnostic);
    }

    #[test]
    fn bmo_indicator_eta_bounded_by_one() {
        let e = ens(40, 4000, 52);
        let est = CondExpEstimator::default();
        let b = e.brownian();
        let n = e.n_steps();
        let eta: Vec<f64> = (0..e.n_paths())
            .map(|p| if b.scalar(p, n) > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let rep = bmo_diagnostic(&e, &eta, &est, &[0, 10, 20, 30]).unwrap();
        assert_eq!(rep.m_hat, 1.0);
        assert!(rep.diagnostic <= 1.0 + 0.05, "diag {}", rep.diagnostic);
    }

    #[test]
    fn bmo_bihari_eta_bounded_by_budget_formula() {
        // eta = int beta rho(mu) ds from a modulus instance; the proof's
        // envelope M = A (1 + C) ||int beta|| dominates its square
        let e = ens(40, 1000, 53);
        let est = CondExpEstimator::default();
        let rho = make_h(0.1).unwrap();
        let c = 0.05;
        let beta_level = 1.0;
        let inst = make_saturated_bihari(
            &e,
            c,
            AdaptedProcess::constant(&e, beta_level),
            rho.clone(),
            &est,
        )
        .unwrap();
        let grid = e.grid();
        let n = e.n_steps();
        let eta: Vec<f64> = (0..e.n_paths())
            .map(|p| {
                (0..n)
                    .map(|s| beta_level * rho.eval(inst.mu.scalar(p, s)) * grid.dt(s))
                    .sum()
            })
            .collect();
        let a = rho.linear_bound_a().max(1.0);
        let budget = beta_level * 1.0;
        let big_c = (a * budget).exp() * (c + a * budget);
        let m = a * (1.0 + big_c) * budget;
        let rep = bmo_diagnostic(&e, &eta, &est, &[0, 10, 20, 30]).unwrap();
        assert!(rep.m_hat <= m, "m_hat {} vs M {}", rep.m_hat, m);
        assert!(
            rep.diagnostic <= m * m + 1e-6,
            "diag {} vs M^2 {}",
            rep.diagnostic,
            m * m
        );
    }

    #[test]
    fn bmo_rejects_non_finite_eta() {
        let e = ens(10, 20, 54);
        let est = CondExpEstimator::default();
        let mut eta = vec![1.0; e.n_paths()];
        eta[3] = f64::INFINITY;
        assert!(bmo_diagnostic(&e, &eta, &est, &[0]).is_err());
    }
}
