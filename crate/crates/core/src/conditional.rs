//! Conditional expectations on the ensemble: least-squares regression on
//! polynomial state features, and a nested Monte Carlo oracle for
//! validating regression output at small scale.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{AdaptedProcess, PathEnsemble};

/// Fixed chunk size for the parallel design-matrix accumulation; chunks are
/// reduced in index order so results do not depend on the thread count.
const ACCUM_CHUNK: usize = 8192;

/// Configuration of the conditional-expectation operator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondExpEstimator {
    #[serde(default = "default_kind")]
    pub kind: EstimatorKind,
    /// Total polynomial degree of the regression basis.
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Ridge parameter guarding the normal equations.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Inner path count for the nested Monte Carlo oracle.
    #[serde(default = "default_inner")]
    pub inner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Regression,
    NestedMc,
}

fn default_kind() -> EstimatorKind {
    EstimatorKind::Regression
}
fn default_degree() -> usize {
    3
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_inner() -> usize {
    512
}

impl Default for CondExpEstimator {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            degree: default_degree(),
            ridge: default_ridge(),
            inner: default_inner(),
        }
    }
}

/// Default regression state: the Brownian coordinates plus the running
/// budgets `int |B| ds` and `int |B|^2 ds`.
pub fn default_state_features(ensemble: &Arc<PathEnsemble>) -> AdaptedProcess {
    let d = ensemble.dim();
    let b = ensemble.brownian();
    let grid = ensemble.grid().clone();
    let n = grid.n_steps();
    AdaptedProcess::from_path_fn(ensemble, d + 2, |path, out| {
        let mut int_abs = 0.0;
        let mut int_sq = 0.0;
        for node in 0..=n {
            let bv = b.value(path, node);
            let base = node * (d + 2);
            out[base..base + d].copy_from_slice(bv);
            out[base + d] = int_abs;
            out[base + d + 1] = int_sq;
            if node < n {
                let q: f64 = bv.iter().map(|x| x * x).sum();
                int_abs += q.sqrt() * grid.dt(node);
                int_sq += q * grid.dt(node);
            }
        }
    })
}

/// A fitted polynomial regression: keeps the basis and coefficients so the
/// fitted conditional mean can be re-evaluated at arbitrary states.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    exponents: Vec<Vec<u8>>,
    centers: Vec<f64>,
    scales: Vec<f64>,
    /// `n_basis x n_targets` coefficients.
    coeffs: DMatrix<f64>,
    pub ridge_used: f64,
    /// Set when the normal equations needed a larger ridge than configured.
    pub ridge_escalated: bool,
    /// Per-target RMS of the regression residual.
    pub residual_rms: Vec<f64>,
    pub n_samples: usize,
}

impl RegressionFit {
    pub fn n_targets(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn n_basis(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Standard error of the fitted conditional mean, per target
    /// (residual RMS over sqrt of the sample count).
    pub fn standard_error(&self, target: usize) -> f64 {
        self.residual_rms[target] / (self.n_samples as f64).sqrt()
    }

    pub fn predict_into(&self, state: &[f64], out: &mut [f64]) {
        let mut phi = vec![0.0; self.n_basis()];
        self.basis_into(state, &mut phi);
        for t in 0..self.n_targets() {
            let mut acc = 0.0;
            for (j, &p) in phi.iter().enumerate() {
                acc += p * self.coeffs[(j, t)];
            }
            out[t] = acc;
        }
    }

    fn basis_into(&self, state: &[f64], phi: &mut [f64]) {
        let f = self.centers.len();
        let mut scaled = vec![0.0; f];
        for i in 0..f {
            scaled[i] = (state[i] - self.centers[i]) / self.scales[i];
        }
        for (j, exps) in self.exponents.iter().enumerate() {
            let mut m = 1.0;
            for (i, &e) in exps.iter().enumerate() {
                for _ in 0..e {
                    m *= scaled[i];
                }
            }
            phi[j] = m;
        }
    }
}

fn monomial_exponents(n_features: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut current = vec![0u8; n_features];
    fn rec(out: &mut Vec<Vec<u8>>, current: &mut Vec<u8>, idx: usize, remaining: usize) {
        if idx == current.len() {
            out.push(current.clone());
            return;
        }
        for e in 0..=remaining {
            current[idx] = e as u8;
            rec(out, current, idx + 1, remaining - e);
        }
        current[idx] = 0;
    }
    rec(&mut out, &mut current, 0, degree);
    out
}

/// Least-squares projection of per-path targets onto polynomial features of
/// the state at `node`. Targets are columns of `values` (`n_paths x
/// n_targets`, row-major). Returns per-path fitted values and the fit.
pub fn regress_at_node(
    features: &AdaptedProcess,
    node: usize,
    values: &[f64],
    n_targets: usize,
    estimator: &CondExpEstimator,
) -> Result<(Vec<f64>, RegressionFit)> {
    let ensemble = features.ensemble();
    let n_paths = ensemble.n_paths();
    if values.len() != n_paths * n_targets {
        return Err(Error::InvalidArgument(format!(
            "expected {} target values, got {}",
            n_paths * n_targets,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite regression target".into()));
    }
    let f = features.dim_out();

    // feature standardization for conditioning; affine maps leave the span
    // of the polynomial basis unchanged
    let mut centers = vec![0.0; f];
    let mut scales = vec![0.0; f];
    for path in 0..n_paths {
        let s = features.value(path, node);
        for i in 0..f {
            centers[i] += s[i];
        }
    }
    for c in centers.iter_mut() {
        *c /= n_paths as f64;
    }
    for path in 0..n_paths {
        let s = features.value(path, node);
        for i in 0..f {
            let d = s[i] - centers[i];
            scales[i] += d * d;
        }
    }
    for s in scales.iter_mut() {
        *s = (*s / n_paths as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }

    let exponents = monomial_exponents(f, estimator.degree);
    let nb = exponents.len();

    // accumulate G = sum phi phi^T and B = sum phi y^T over fixed chunks,
    // reduced in chunk order (thread-count independent)
    let chunk_results: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n_paths)
        .collect::<Vec<_>>()
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            let mut g = DMatrix::<f64>::zeros(nb, nb);
            let mut b = DMatrix::<f64>::zeros(nb, n_targets);
            let mut phi = vec![0.0; nb];
            let mut scaled = vec![0.0; f];
            for &path in chunk {
                let s = features.value(path, node);
                for i in 0..f {
                    scaled[i] = (s[i] - centers[i]) / scales[i];
                }
                for (j, exps) in exponents.iter().enumerate() {
                    let mut m = 1.0;
                    for (i, &e) in exps.iter().enumerate() {
                        for _ in 0..e {
                            m *= scaled[i];
                        }
                    }
                    phi[j] = m;
                }
                for j in 0..nb {
                    let pj = phi[j];
                    for l in j..nb {
                        g[(j, l)] += pj * phi[l];
                    }
                    for t in 0..n_targets {
                        b[(j, t)] += pj * values[path * n_targets + t];
                    }
                }
            }
            (g, b)
        })
        .collect();
    let mut g = DMatrix::<f64>::zeros(nb, nb);
    let mut bmat = DMatrix::<f64>::zeros(nb, n_targets);
    for (cg, cb) in chunk_results {
        g += cg;
        bmat += cb;
    }
    for j in 0..nb {
        for l in 0..j {
            g[(j, l)] = g[(l, j)];
        }
    }

    // ridge escalation on Cholesky failure, flagged in the fit
    let scale = g.diagonal().max();
    let mut ridge = estimator.ridge;
    let mut escalated = false;
    let coeffs = loop {
        let mut gr = g.clone();
        for j in 0..nb {
            // the intercept stays unpenalized so constants are reproduced
            // exactly
            if exponents[j].iter().all(|&e| e == 0) {
                continue;
            }
            gr[(j, j)] += ridge * scale.max(1.0);
        }
        match Cholesky::new(gr) {
            Some(chol) => break chol.solve(&bmat),
            None => {
                ridge = if ridge > 0.0 { ridge * 100.0 } else { 1e-10 };
                escalated = true;
                if ridge > 1.0 {
                    return Err(Error::InvalidArgument(
                        "regression matrix singular beyond ridge rescue".into(),
                    ));
                }
            }
        }
    };

    let fit = RegressionFit {
        exponents,
        centers,
        scales,
        coeffs,
        ridge_used: ridge,
        ridge_escalated: escalated,
        residual_rms: vec![0.0; n_targets],
        n_samples: n_paths,
    };

    let mut fitted = vec![0.0; n_paths * n_targets];
    fitted
        .par_chunks_mut(n_targets * ACCUM_CHUNK.min(n_paths))
        .enumerate()
        .for_each(|(ci, chunk)| {
            let start = ci * ACCUM_CHUNK.min(n_paths);
            for (off, row) in chunk.chunks_mut(n_targets).enumerate() {
                fit.predict_into(features.value(start + off, node), row);
            }
        });

    let mut residual_rms = vec![0.0; n_targets];
    for path in 0..n_paths {
        for t in 0..n_targets {
            let r = values[path * n_targets + t] - fitted[path * n_targets + t];
            residual_rms[t] += r * r;
        }
    }
    for r in residual_rms.iter_mut() {
        *r = (*r / n_paths as f64).sqrt();
    }
    let fit = RegressionFit {
        residual_rms,
        ..fit
    };
    Ok((fitted, fit))
}

/// Conditional expectation of later-time values given the state at
/// `condition_node`, with the configured estimator's regression settings.
pub fn cond_expect(
    features: &AdaptedProcess,
    condition_node: usize,
    values: &[f64],
    n_targets: usize,
    estimator: &CondExpEstimator,
) -> Result<(Vec<f64>, RegressionFit)> {
    regress_at_node(features, condition_node, values, n_targets, estimator)
}

/// Discrete martingale integrand at `step`: regression estimate of
/// `E[y_next (x) dB_step | F_step] / dt_step`.
///
/// The conditional mean of `y_next` is subtracted from the target before
/// multiplying by the increment (control variate); pass it when already
/// available from the backward sweep, otherwise it is fitted here.
pub fn cond_expect_z(
    features: &AdaptedProcess,
    step: usize,
    y_next: &[f64],
    k: usize,
    y_next_mean: Option<&[f64]>,
    estimator: &CondExpEstimator,
) -> Result<(Vec<f64>, RegressionFit)> {
    let ensemble = features.ensemble();
    if step >= ensemble.n_steps() {
        return Err(Error::InvalidArgument("step beyond the grid".into()));
    }
    let n_paths = ensemble.n_paths();
    let d = ensemble.dim();
    let dt = ensemble.grid().dt(step);
    let owned_mean;
    let mean: &[f64] = match y_next_mean {
        Some(m) => m,
        None => {
            let (m, _) = regress_at_node(features, step, y_next, k, estimator)?;
            owned_mean = m;
            &owned_mean
        }
    };
    let mut targets = vec![0.0; n_paths * k * d];
    for path in 0..n_paths {
        let inc = ensemble.increment(path, step);
        for a in 0..k {
            let centered = y_next[path * k + a] - mean[path * k + a];
            for b in 0..d {
                targets[(path * k + a) * d + b] = centered * inc[b] / dt;
            }
        }
    }
    regress_at_node(features, step, &targets, k * d, estimator)
}

/// A path spliced at the conditioning node: original history, fresh future.
pub struct ContinuationPath<'a> {
    pub nodes: &'a [f64],
    pub dim: usize,
    /// Brownian values at every node, row-major.
    pub b: &'a [f64],
}

impl ContinuationPath<'_> {
    pub fn value(&self, node: usize) -> &[f64] {
        &self.b[node * self.dim..(node + 1) * self.dim]
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Nested Monte Carlo oracle: for each outer path, re-simulates `inner`
/// continuations forward from the state at `condition_node` and averages
/// the payoff. Returns per-path estimates and per-path standard errors.
pub fn nested_mc_cond_expect<F>(
    ensemble: &Arc<PathEnsemble>,
    condition_node: usize,
    inner: usize,
    seed: u64,
    payoff: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(usize, &ContinuationPath) -> f64 + Sync,
{
    if inner == 0 {
        return Err(Error::InvalidArgument("inner path count must be >= 1".into()));
    }
    let n = ensemble.n_steps();
    let d = ensemble.dim();
    if condition_node > n {
        return Err(Error::InvalidArgument("condition node beyond the grid".into()));
    }
    let grid = ensemble.grid().clone();
    let nodes: Vec<f64> = grid.nodes().to_vec();
    let b = ensemble.brownian();
    let n_paths = ensemble.n_paths();
    let mut out = vec![(0.0, 0.0); n_paths];
    out.par_iter_mut().enumerate().for_each(|(outer, slot)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        rng.set_stream(outer as u64 + 1);
        let mut spliced = vec![0.0; (n + 1) * d];
        for node in 0..=condition_node {
            spliced[node * d..(node + 1) * d].copy_from_slice(b.value(outer, node));
        }
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..inner {
            for step in condition_node..n {
                let dt_sqrt = grid.dt(step).sqrt();
                for c in 0..d {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    spliced[(step + 1) * d + c] = spliced[step * d + c] + g * dt_sqrt;
                }
            }
            let path = ContinuationPath {
                nodes: &nodes,
                dim: d,
                b: &spliced,
            };
            let v = payoff(outer, &path);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / inner as f64;
        let var = (sum_sq / inner as f64 - mean * mean).max(0.0);
        *slot = (mean, (var / inner as f64).sqrt());
    });
    let means = out.iter().map(|&(m, _)| m).collect();
    let ses = out.iter().map(|&(_, s)| s).collect();
    Ok((means, ses))
}
