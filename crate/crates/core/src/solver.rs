//! Backward solver on the ensemble: implicit one-step induction for
//! z-free drivers, a budget-driven stopping-time partition, the outer
//! Picard iteration with the previous z frozen inside the driver, random
//! terminal times, and residual / a priori diagnostics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::{
    cond_expect_z, default_state_features, regress_at_node, CondExpEstimator, RegressionFit,
};
use crate::error::{Error, Result};
use crate::generators::{ACertificate, PreparedGenerator};
use crate::paths::{
    hitting_time, norms, AdaptedProcess, PathEnsemble, StoppingTimeField,
};

/// Terminal data: one vector per path, measurable at the terminal node (or
/// at a stopping node when solving on a random interval).
#[derive(Debug, Clone)]
pub struct TerminalCondition {
    k: usize,
    values: Vec<f64>,
}

impl TerminalCondition {
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || values.len() % k != 0 {
            return Err(Error::InvalidArgument(
                "terminal values must hold one k-vector per path".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite terminal value".into()));
        }
        Ok(Self { k, values })
    }

    /// Builds the terminal vector path by path.
    pub fn from_fn(
        ensemble: &Arc<PathEnsemble>,
        k: usize,
        fill: impl Fn(usize, &mut [f64]),
    ) -> Result<Self> {
        let mut values = vec![0.0; ensemble.n_paths() * k];
        for (path, chunk) in values.chunks_mut(k).enumerate() {
            fill(path, chunk);
        }
        Self::new(k, values)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_paths(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn value(&self, path: usize) -> &[f64] {
        &self.values[path * self.k..(path + 1) * self.k]
    }

    /// Empirical `E[|xi|^2]`.
    pub fn second_moment(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.n_paths() as f64
    }
}

/// Solver knobs; all defaults are the pinned values used by the test gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub estimator: CondExpEstimator,
    /// Number of partition blocks N.
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_max_picard")]
    pub max_picard_iter: usize,
    /// Damping of the per-step implicit fixed point.
    #[serde(default = "default_inner_theta")]
    pub inner_theta: f64,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_max_inner")]
    pub max_inner_iter: usize,
    /// The unpinned universal constant in the contraction estimate.
    #[serde(default = "default_c_universal")]
    pub c_universal: f64,
}

fn default_n_blocks() -> usize {
    8
}
fn default_picard_tol() -> f64 {
    1e-3
}
fn default_max_picard() -> usize {
    25
}
fn default_inner_theta() -> f64 {
    0.5
}
fn default_inner_tol() -> f64 {
    1e-10
}
fn default_max_inner() -> usize {
    50
}
fn default_c_universal() -> f64 {
    2.0
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            estimator: CondExpEstimator::default(),
            n_blocks: default_n_blocks(),
            picard_tol: default_picard_tol(),
            max_picard_iter: default_max_picard(),
            inner_theta: default_inner_theta(),
            inner_tol: default_inner_tol(),
            max_inner_iter: default_max_inner(),
            c_universal: default_c_universal(),
        }
    }
}

/// Partition bookkeeping carried into reports.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionSummary {
    /// Ess-sup (path max) of the total budget `int (u + v^2) ds`.
    pub m_budget: f64,
    pub n_blocks: usize,
    /// `4 c^2 A^2 exp(2 c A || int u ||)`.
    pub contraction_constant: f64,
    /// Whether `M / N <= 1 / (4 C)`; the bound is sufficient, not
    /// necessary, so a failed check only produces a warning downstream.
    pub ratio_ok: bool,
}

/// Random block boundaries `T_0 = 0 <= T_1 <= ... <= T_N = horizon`,
/// exhausting the Lipschitz budget in equal shares.
pub struct Partition {
    pub summary: PartitionSummary,
    /// `n_blocks + 1` stopping fields.
    pub boundaries: Vec<StoppingTimeField>,
}

/// Builds the partition from the prepared weights: boundary `j` is the
/// first time the running `int v^2 ds` reaches `j M / N`, capped at the
/// horizon.
pub fn build_partition(
    prep: &PreparedGenerator,
    n_blocks: usize,
    c_universal: f64,
) -> Result<Partition> {
    if n_blocks == 0 {
        return Err(Error::InvalidArgument("need at least one block".into()));
    }
    let ensemble = prep.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let u = prep.certified_u();
    let mut m_budget = 0.0_f64;
    let mut u_budget = 0.0_f64;
    for path in 0..ensemble.n_paths() {
        let mut total = 0.0;
        let mut u_total = 0.0;
        for step in 0..n {
            let uv = u.scalar(path, step);
            let vv = prep.v.scalar(path, step);
            total += (uv + vv * vv) * grid.dt(step);
            u_total += uv * grid.dt(step);
        }
        m_budget = m_budget.max(total);
        u_budget = u_budget.max(u_total);
    }
    let a = prep.spec.rho().linear_bound_a().max(1.0);
    let c = c_universal;
    let contraction = 4.0 * c * c * a * a * (2.0 * c * a * u_budget).exp();
    let ratio_ok = m_budget / n_blocks as f64 <= 1.0 / (4.0 * contraction);

    let mut boundaries = Vec::with_capacity(n_blocks + 1);
    boundaries.push(StoppingTimeField::new(
        ensemble,
        vec![0; ensemble.n_paths()],
    )?);
    if m_budget == 0.0 {
        for _ in 0..n_blocks {
            boundaries.push(StoppingTimeField::terminal(ensemble));
        }
    } else {
        for j in 1..=n_blocks {
            let level = j as f64 * m_budget / n_blocks as f64;
            boundaries.push(hitting_time(&prep.v, level, 2)?);
        }
        // the last boundary is the horizon by the inf-empty-set convention
        let last = boundaries.last_mut().unwrap();
        *last = StoppingTimeField::terminal(ensemble);
    }
    Ok(Partition {
        summary: PartitionSummary {
            m_budget,
            n_blocks,
            contraction_constant: contraction,
            ratio_ok,
        },
        boundaries,
    })
}

/// Per-sweep diagnostics; the stored fits let a sweep be replayed as a
/// pointwise function of the node state (the adaptedness audit).
pub struct SweepDiagnostics {
    pub y_fits: Vec<RegressionFit>,
    pub z_fits: Vec<RegressionFit>,
    pub max_inner_iterations: usize,
    pub ridge_escalations: usize,
}

struct SweepOutput {
    y: AdaptedProcess,
    z: AdaptedProcess,
    diag: SweepDiagnostics,
}

fn backward_sweep(
    prep: &PreparedGenerator,
    features: &AdaptedProcess,
    xi: &TerminalCondition,
    frozen_z: Option<&AdaptedProcess>,
    mask: &StoppingTimeField,
    config: &SolverConfig,
) -> Result<SweepOutput> {
    let ensemble = prep.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let k = prep.k();
    let d = prep.d();
    let n_paths = ensemble.n_paths();
    if xi.k() != k || xi.n_paths() != n_paths {
        return Err(Error::InvalidArgument(
            "terminal condition shape does not match the generator/ensemble".into(),
        ));
    }

    let y_stride = (n + 1) * k;
    let z_stride = (n + 1) * k * d;
    let mut y_vals = vec![0.0; n_paths * y_stride];
    let mut z_vals = vec![0.0; n_paths * z_stride];
    for path in 0..n_paths {
        y_vals[path * y_stride + n * k..path * y_stride + (n + 1) * k]
            .copy_from_slice(xi.value(path));
    }

    let mut y_fits = Vec::with_capacity(n);
    let mut z_fits = Vec::with_capacity(n);
    let mut max_inner = 0usize;
    let mut escalations = 0usize;
    // (worst delta, inner iterations) per path, refreshed each step
    let mut inner_stats = vec![(0.0_f64, 0usize); n_paths];

    for i in (0..n).rev() {
        let mut targets = vec![0.0; n_paths * k];
        for path in 0..n_paths {
            targets[path * k..(path + 1) * k].copy_from_slice(
                &y_vals[path * y_stride + (i + 1) * k..path * y_stride + (i + 2) * k],
            );
        }
        let (mean, fit_y) = regress_at_node(features, i, &targets, k, &config.estimator)?;
        let (z_fit_vals, fit_z) =
            cond_expect_z(features, i, &targets, k, Some(&mean), &config.estimator)?;
        escalations += usize::from(fit_y.ridge_escalated) + usize::from(fit_z.ridge_escalated);

        let dt = grid.dt(i);
        let theta = config.inner_theta;
        let stop_index = mask.stop_index();
        y_vals
            .par_chunks_mut(y_stride)
            .zip(z_vals.par_chunks_mut(z_stride))
            .zip(inner_stats.par_iter_mut())
            .enumerate()
            .for_each(|(path, ((y_chunk, z_chunk), stat))| {
                *stat = (0.0, 0);
                if i >= stop_index[path] {
                    // past the random terminal time: y frozen at xi, z = 0
                    let (head, _) = y_chunk.split_at_mut((i + 1) * k);
                    head[i * k..].copy_from_slice(xi.value(path));
                    z_chunk[i * k * d..(i + 1) * k * d].fill(0.0);
                    return;
                }
                z_chunk[i * k * d..(i + 1) * k * d]
                    .copy_from_slice(&z_fit_vals[path * k * d..(path + 1) * k * d]);
                let z_for_g: &[f64] = match frozen_z {
                    Some(fz) => fz.value(path, i),
                    None => &z_chunk[i * k * d..(i + 1) * k * d],
                };
                let m = &mean[path * k..(path + 1) * k];
                let mut cur = m.to_vec();
                let mut g = vec![0.0; k];
                let mut delta = f64::INFINITY;
                let mut iters = 0usize;
                for _ in 0..config.max_inner_iter {
                    prep.eval_into(path, i, &cur, z_for_g, &mut g);
                    let mut step_delta = 0.0_f64;
                    let mut norm = 0.0_f64;
                    for a in 0..k {
                        let proposal = m[a] + dt * g[a];
                        let next = (1.0 - theta) * cur[a] + theta * proposal;
                        step_delta = step_delta.max((next - cur[a]).abs());
                        norm = norm.max(next.abs());
                        cur[a] = next;
                    }
                    iters += 1;
                    delta = step_delta;
                    if step_delta <= config.inner_tol * (1.0 + norm) {
                        break;
                    }
                }
                *stat = (delta, iters);
                y_chunk[i * k..(i + 1) * k].copy_from_slice(&cur);
            });

        for &(delta, iters) in &inner_stats {
            if iters >= config.max_inner_iter
                && delta > config.inner_tol * (1.0 + 1.0)
                && delta > 1e-8
            {
                return Err(Error::FixedPoint { step: i, delta });
            }
            max_inner = max_inner.max(iters);
        }
        y_fits.push(fit_y);
        z_fits.push(fit_z);
    }
    y_fits.reverse();
    z_fits.reverse();

    Ok(SweepOutput {
        y: AdaptedProcess::from_values(ensemble, k, y_vals)?,
        z: AdaptedProcess::from_values(ensemble, k * d, z_vals)?,
        diag: SweepDiagnostics {
            y_fits,
            z_fits,
            max_inner_iterations: max_inner,
            ridge_escalations: escalations,
        },
    })
}

/// Re-runs a sweep with frozen regression fits: every node value becomes a
/// pointwise function of the state at that node, so the output must pass
/// the future-permutation audit whenever the inputs do.
pub fn replay_sweep(
    prep: &PreparedGenerator,
    xi: &TerminalCondition,
    frozen_z: Option<&AdaptedProcess>,
    mask: &StoppingTimeField,
    diag: &SweepDiagnostics,
    config: &SolverConfig,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    let ensemble = prep.ensemble();
    let features = default_state_features(ensemble);
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let k = prep.k();
    let d = prep.d();
    if diag.y_fits.len() != n || diag.z_fits.len() != n {
        return Err(Error::InvalidArgument("fit ladder length mismatch".into()));
    }
    let n_paths = ensemble.n_paths();
    let y_stride = (n + 1) * k;
    let z_stride = (n + 1) * k * d;
    let mut y_vals = vec![0.0; n_paths * y_stride];
    let mut z_vals = vec![0.0; n_paths * z_stride];
    for path in 0..n_paths {
        y_vals[path * y_stride + n * k..path * y_stride + (n + 1) * k]
            .copy_from_slice(xi.value(path));
    }
    for i in (0..n).rev() {
        let dt = grid.dt(i);
        let theta = config.inner_theta;
        for path in 0..n_paths {
            let base_y = path * y_stride + i * k;
            let base_z = path * z_stride + i * k * d;
            if i >= mask.index(path) {
                y_vals[base_y..base_y + k].copy_from_slice(xi.value(path));
                z_vals[base_z..base_z + k * d].fill(0.0);
                continue;
            }
            let state = features.value(path, i);
            let mut m = vec![0.0; k];
            diag.y_fits[i].predict_into(state, &mut m);
            let mut z_row = vec![0.0; k * d];
            diag.z_fits[i].predict_into(state, &mut z_row);
            z_vals[base_z..base_z + k * d].copy_from_slice(&z_row);
            let z_for_g: &[f64] = match frozen_z {
                Some(fz) => fz.value(path, i),
                None => &z_row,
            };
            let mut cur = m.clone();
            let mut g = vec![0.0; k];
            for _ in 0..config.max_inner_iter {
                prep.eval_into(path, i, &cur, z_for_g, &mut g);
                let mut step_delta = 0.0_f64;
                let mut norm = 0.0_f64;
                for a in 0..k {
                    let proposal = m[a] + dt * g[a];
                    let next = (1.0 - theta) * cur[a] + theta * proposal;
                    step_delta = step_delta.max((next - cur[a]).abs());
                    norm = norm.max(next.abs());
                    cur[a] = next;
                }
                if step_delta <= config.inner_tol * (1.0 + norm) {
                    break;
                }
            }
            y_vals[base_y..base_y + k].copy_from_slice(&cur);
        }
    }
    Ok((
        AdaptedProcess::from_values(ensemble, k, y_vals)?,
        AdaptedProcess::from_values(ensemble, k * d, z_vals)?,
    ))
}

/// Iteration history and partition data of a solve.
#[derive(Debug, Clone, Serialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub converged: bool,
    /// Sup-type norm of the y-difference per iteration.
    pub y_diffs: Vec<f64>,
    /// Square-integral norm of the z-difference per iteration.
    pub z_diffs: Vec<f64>,
    /// Per-iteration, per-block z-difference norms.
    pub block_z_diffs: Vec<Vec<f64>>,
    pub partition: PartitionSummary,
    pub warning: Option<String>,
    pub max_inner_iterations: usize,
    pub ridge_escalations: usize,
    pub terminal_second_moment: f64,
}

/// A solved pair with its report.
pub struct SolutionPair {
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub report: PicardReport,
    /// Fits of the final sweep, for replay audits and window estimates.
    pub final_sweep: SweepDiagnostics,
}

/// Starting point of the Picard iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// `(y^0, z^0) = (0, 0)`.
    Zero,
    /// `y^0` constant at the terminal data, `z^0` the martingale
    /// integrand of its conditional mean.
    TerminalPropagated,
}

fn process_diff(a: &AdaptedProcess, b: &AdaptedProcess) -> AdaptedProcess {
    let mut out = a.clone();
    for (o, v) in out.values_mut().iter_mut().zip(b.values()) {
        *o -= v;
    }
    out
}

fn block_z_norms(dz: &AdaptedProcess, partition: &Partition) -> Vec<f64> {
    let ensemble = dz.ensemble();
    let grid = ensemble.grid();
    let n_paths = ensemble.n_paths();
    let nb = partition.summary.n_blocks;
    let mut out = Vec::with_capacity(nb);
    for j in 1..=nb {
        let lo = &partition.boundaries[j - 1];
        let hi = &partition.boundaries[j];
        let mut acc = 0.0;
        for path in 0..n_paths {
            let mut s = 0.0;
            for step in lo.index(path)..hi.index(path) {
                let v = dz.value(path, step);
                let q: f64 = v.iter().map(|x| x * x).sum();
                s += q * grid.dt(step);
            }
            acc += s;
        }
        out.push((acc / n_paths as f64).sqrt());
    }
    out
}

fn picard_masked(
    prep: &PreparedGenerator,
    xi: &TerminalCondition,
    mask: &StoppingTimeField,
    partition: &Partition,
    config: &SolverConfig,
    init: InitStrategy,
) -> Result<SolutionPair> {
    let ensemble = prep.ensemble();
    let features = default_state_features(ensemble);
    let k = prep.k();
    let d = prep.d();
    let n = ensemble.n_steps();
    let n_paths = ensemble.n_paths();

    let (mut prev_y, mut prev_z) = match init {
        InitStrategy::Zero => (
            AdaptedProcess::from_values(ensemble, k, vec![0.0; n_paths * (n + 1) * k])?,
            AdaptedProcess::from_values(ensemble, k * d, vec![0.0; n_paths * (n + 1) * k * d])?,
        ),
        InitStrategy::TerminalPropagated => {
            let mut y_vals = vec![0.0; n_paths * (n + 1) * k];
            for path in 0..n_paths {
                for node in 0..=n {
                    y_vals[(path * (n + 1) + node) * k..(path * (n + 1) + node + 1) * k]
                        .copy_from_slice(xi.value(path));
                }
            }
            let mut targets = vec![0.0; n_paths * k];
            for path in 0..n_paths {
                targets[path * k..(path + 1) * k].copy_from_slice(xi.value(path));
            }
            let mut z_vals = vec![0.0; n_paths * (n + 1) * k * d];
            for step in 0..n {
                let (z_step, _) =
                    cond_expect_z(&features, step, &targets, k, None, &config.estimator)?;
                for path in 0..n_paths {
                    z_vals[(path * (n + 1) + step) * k * d..(path * (n + 1) + step + 1) * k * d]
                        .copy_from_slice(&z_step[path * k * d..(path + 1) * k * d]);
                }
            }
            (
                AdaptedProcess::from_values(ensemble, k, y_vals)?,
                AdaptedProcess::from_values(ensemble, k * d, z_vals)?,
            )
        }
    };

    let warning = if partition.summary.ratio_ok {
        None
    } else {
        Some(format!(
            "budget per block {:.3e} exceeds 1/(4C) = {:.3e}; proceeding anyway",
            partition.summary.m_budget / partition.summary.n_blocks as f64,
            1.0 / (4.0 * partition.summary.contraction_constant)
        ))
    };

    let mut y_diffs = Vec::new();
    let mut z_diffs = Vec::new();
    let mut block_diffs = Vec::new();
    let mut converged = false;
    let mut last: Option<SweepOutput> = None;
    let z_dep = prep.spec.z_dependent();

    for _ in 0..config.max_picard_iter {
        let out = backward_sweep(
            prep,
            &features,
            xi,
            z_dep.then_some(&prev_z),
            mask,
            config,
        )?;
        let dy = process_diff(&out.y, &prev_y);
        let dz = process_diff(&out.z, &prev_z);
        let rep = norms(&dy, &dz)?;
        y_diffs.push(rep.s2_norm);
        z_diffs.push(rep.m2_norm);
        block_diffs.push(block_z_norms(&dz, partition));
        prev_y = out.y.clone();
        prev_z = out.z.clone();
        last = Some(out);
        if rep.s2_norm <= config.picard_tol && rep.m2_norm <= config.picard_tol {
            converged = true;
            break;
        }
    }
    let out = last.expect("at least one sweep");
    let report = PicardReport {
        iterations: y_diffs.len(),
        converged,
        y_diffs,
        z_diffs,
        block_z_diffs: block_diffs,
        partition: partition.summary.clone(),
        warning,
        max_inner_iterations: out.diag.max_inner_iterations,
        ridge_escalations: out.diag.ridge_escalations,
        terminal_second_moment: xi.second_moment(),
    };
    Ok(SolutionPair {
        y: out.y,
        z: out.z,
        report,
        final_sweep: out.diag,
    })
}

/// Single-sweep solve for drivers that ignore z.
pub fn solve_z_independent(
    prep: &PreparedGenerator,
    xi: &TerminalCondition,
    config: &SolverConfig,
) -> Result<SolutionPair> {
    if prep.spec.z_dependent() {
        return Err(Error::InvalidArgument(
            "driver declares z-dependence; use picard_solve".into(),
        ));
    }
    // probe: the declared independence must hold at sampled points
    let k = prep.k();
    let d = prep.d();
    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; k];
    let y_probe: Vec<f64> = (0..k).map(|a| 0.3 * (a as f64 + 1.0)).collect();
    let z_a = vec![0.7; k * d];
    let z_b = vec![-1.3; k * d];
    prep.eval_into(0, 0, &y_probe, &z_a, &mut g1);
    prep.eval_into(0, 0, &y_probe, &z_b, &mut g2);
    if g1 != g2 {
        return Err(Error::InvalidArgument(
            "driver declared z-free but output depends on z".into(),
        ));
    }
    let partition = build_partition(prep, 1, config.c_universal)?;
    let ensemble = prep.ensemble();
    let features = default_state_features(ensemble);
    let mask = StoppingTimeField::terminal(ensemble);
    let out = backward_sweep(prep, &features, xi, None, &mask, config)?;
    let report = PicardReport {
        iterations: 1,
        converged: true,
        y_diffs: vec![],
        z_diffs: vec![],
        block_z_diffs: vec![],
        partition: partition.summary,
        warning: None,
        max_inner_iterations: out.diag.max_inner_iterations,
        ridge_escalations: out.diag.ridge_escalations,
        terminal_second_moment: xi.second_moment(),
    };
    Ok(SolutionPair {
        y: out.y,
        z: out.z,
        report,
        final_sweep: out.diag,
    })
}

/// Full Picard solve on the fixed interval.
pub fn picard_solve(
    prep: &PreparedGenerator,
    xi: &TerminalCondition,
    partition: &Partition,
    config: &SolverConfig,
) -> Result<SolutionPair> {
    let mask = StoppingTimeField::terminal(prep.ensemble());
    picard_masked(prep, xi, &mask, partition, config, InitStrategy::Zero)
}

/// Picard solve from a chosen starting point (uniqueness experiments).
pub fn picard_solve_from(
    prep: &PreparedGenerator,
    xi: &TerminalCondition,
    partition: &Partition,
    config: &SolverConfig,
    init: InitStrategy,
) -> Result<SolutionPair> {
    let mask = StoppingTimeField::terminal(prep.ensemble());
    picard_masked(prep, xi, &mask, partition, config, init)
}

/// Solve on the random interval `[0, tau]`: the terminal data and stopping
/// time are rebuilt from the ensemble by the given closures so their
/// measurability at the stop node can be audited first. Past `tau` the
/// output satisfies `y = xi` and `z = 0` on every path.
pub fn solve_random_terminal(
    prep: &PreparedGenerator,
    tau_build: impl Fn(&Arc<PathEnsemble>) -> StoppingTimeField,
    xi_build: impl Fn(&Arc<PathEnsemble>, &StoppingTimeField) -> Vec<f64>,
    partition: &Partition,
    config: &SolverConfig,
    probe_seed: u64,
) -> Result<SolutionPair> {
    let ensemble = prep.ensemble();
    let k = prep.k();
    let n = ensemble.n_steps();
    // measurability probe: the stopped field 1_{tau <= m} xi must be
    // adapted; a terminal value leaking future increments fails here
    for node in [n / 4, n / 2, 3 * n / 4] {
        let ok = crate::paths::permute_future_test(ensemble, node, probe_seed, |e| {
            let tau = tau_build(e);
            let xi = xi_build(e, &tau);
            AdaptedProcess::from_path_fn(e, k, |path, out| {
                for m in 0..=e.n_steps() {
                    for a in 0..k {
                        out[m * k + a] = if tau.index(path) <= m {
                            xi[path * k + a]
                        } else {
                            0.0
                        };
                    }
                }
            })
        });
        if !ok {
            return Err(Error::NotStopMeasurable);
        }
    }
    let tau = tau_build(ensemble);
    let xi = TerminalCondition::new(k, xi_build(ensemble, &tau))?;
    picard_masked(prep, &xi, &tau, partition, config, InitStrategy::Zero)
}

/// Checks the random-interval shape: `y = xi` and `z = 0` at every node at
/// or past the stop node, on every path.
pub fn random_terminal_invariant(
    pair: &SolutionPair,
    tau: &StoppingTimeField,
    xi: &TerminalCondition,
) -> bool {
    let ensemble = pair.y.ensemble();
    let n = ensemble.n_steps();
    for path in 0..ensemble.n_paths() {
        for node in tau.index(path)..=n {
            if pair.y.value(path, node) != xi.value(path) {
                return false;
            }
            if node < n && pair.z.value(path, node).iter().any(|&v| v != 0.0) {
                return false;
            }
        }
    }
    true
}

/// Discrete backward-equation defect per node.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// `sqrt(mean over paths of sup over nodes |defect|^2)`.
    pub s2_norm: f64,
    pub max_defect: f64,
    pub per_node_rms: Vec<f64>,
}

/// Evaluates, per path and node, the defect of
/// `y_t = xi + sum g dt - sum z dB` over `[t, T]`.
pub fn residual_check(prep: &PreparedGenerator, pair: &SolutionPair) -> Result<ResidualReport> {
    let ensemble = prep.ensemble();
    if !pair.y.same_ensemble(&pair.z) {
        return Err(Error::EnsembleMismatch);
    }
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let k = prep.k();
    let d = prep.d();
    let n_paths = ensemble.n_paths();
    let mut per_node_sq = vec![0.0; n + 1];
    let mut s2_acc = 0.0;
    let mut max_defect = 0.0_f64;
    let mut g = vec![0.0; k];
    // running[a] = sum_{j >= i} (g_j dt_j - z_j dB_j), built backward
    let mut running = vec![0.0; k];
    for path in 0..n_paths {
        running.fill(0.0);
        let xi = pair.y.value(path, n);
        let mut sup_sq = 0.0_f64;
        for i in (0..n).rev() {
            let y = pair.y.value(path, i);
            let z = pair.z.value(path, i);
            prep.eval_into(path, i, y, z, &mut g);
            let inc = ensemble.increment(path, i);
            let dt = grid.dt(i);
            let mut defect_sq = 0.0;
            for a in 0..k {
                let mut z_db = 0.0;
                for c in 0..d {
                    z_db += z[a * d + c] * inc[c];
                }
                running[a] += g[a] * dt - z_db;
                let defect = y[a] - (xi[a] + running[a]);
                defect_sq += defect * defect;
            }
            per_node_sq[i] += defect_sq;
            sup_sq = sup_sq.max(defect_sq);
            max_defect = max_defect.max(defect_sq.sqrt());
        }
        s2_acc += sup_sq;
    }
    let per_node_rms = per_node_sq
        .iter()
        .map(|&s| (s / n_paths as f64).sqrt())
        .collect();
    Ok(ResidualReport {
        s2_norm: (s2_acc / n_paths as f64).sqrt(),
        max_defect,
        per_node_rms,
    })
}

/// One node of the a priori estimate check.
#[derive(Debug, Clone, Serialize)]
pub struct AprioriProbe {
    pub node: usize,
    pub c1: f64,
    pub c2: f64,
    /// Fraction of paths with conditional LHS below the first bound.
    pub fraction_plain: f64,
    /// Same for the modulus-weighted bound.
    pub fraction_weighted: f64,
    pub worst_margin_plain: f64,
    pub worst_margin_weighted: f64,
    /// Combined standard error of the regressions behind the fractions.
    pub standard_error: f64,
}

/// One stopping-window probe (evaluated at the root node, where the
/// conditional expectations are plain means).
#[derive(Debug, Clone, Serialize)]
pub struct AprioriWindowProbe {
    pub label: String,
    pub lhs: f64,
    pub rhs_plain: f64,
    pub rhs_weighted: f64,
    pub standard_error: f64,
    pub satisfied_plain: bool,
    pub satisfied_weighted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AprioriReport {
    pub probes: Vec<AprioriProbe>,
    pub windows: Vec<AprioriWindowProbe>,
}

impl AprioriReport {
    pub fn min_fraction(&self) -> f64 {
        self.probes
            .iter()
            .flat_map(|p| [p.fraction_plain, p.fraction_weighted])
            .fold(1.0, f64::min)
    }

    pub fn windows_satisfied(&self) -> bool {
        self.windows
            .iter()
            .all(|w| w.satisfied_plain && w.satisfied_weighted)
    }
}

fn tail_sums(
    pair: &SolutionPair,
    cert: &ACertificate,
    kappa_of_y: bool,
    from_node: usize,
) -> (Vec<f64>, Vec<f64>) {
    // returns per-path (lhs payload, rhs payload without the constant)
    let ensemble = pair.y.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let mut lhs = vec![0.0; n_paths];
    let mut rhs = vec![0.0; n_paths];
    for path in 0..n_paths {
        let mut sup_y = 0.0_f64;
        for node in from_node..=n {
            let y = pair.y.value(path, node);
            sup_y = sup_y.max(y.iter().map(|x| x * x).sum());
        }
        let mut z_int = 0.0;
        let mut mu_int = 0.0;
        let mut f_int = 0.0;
        for step in from_node..n {
            let dt = grid.dt(step);
            let z = pair.z.value(path, step);
            z_int += z.iter().map(|x| x * x).sum::<f64>() * dt;
            let mu = cert.mu.scalar(path, step);
            if kappa_of_y {
                let y = pair.y.value(path, step);
                let y_sq: f64 = y.iter().map(|x| x * x).sum();
                mu_int += mu * cert.kappa.eval(y_sq) * dt;
            } else {
                mu_int += mu * dt;
            }
            f_int += cert.f.scalar(path, step) * dt;
        }
        let xi = pair.y.value(path, n);
        let xi_sq: f64 = xi.iter().map(|x| x * x).sum();
        lhs[path] = sup_y + z_int;
        rhs[path] = xi_sq + mu_int + f_int * f_int;
    }
    (lhs, rhs)
}

fn budget_sup(cert: &ACertificate, from_node: usize, with_mu: bool) -> f64 {
    let ensemble = cert.lambda.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let mut sup = 0.0_f64;
    for path in 0..ensemble.n_paths() {
        let mut acc = 0.0;
        for step in from_node..n {
            let l = cert.lambda.scalar(path, step);
            let mut v = l * l;
            if with_mu {
                v += cert.mu.scalar(path, step);
            }
            acc += v * grid.dt(step);
        }
        sup = sup.max(acc);
    }
    sup
}

/// Conditional a priori bound check at a ladder of probe nodes and
/// optional stopping windows. The constants are
/// `C1 = 4 c^2 A^2 exp(2 c A || int (mu + lambda^2) ||)` and
/// `C2 = 4 c^2 exp(2 c || int lambda^2 ||)`.
pub fn apriori_check(
    pair: &SolutionPair,
    cert: &ACertificate,
    estimator: &CondExpEstimator,
    c_universal: f64,
    probe_nodes: &[usize],
    windows: &[(StoppingTimeField, StoppingTimeField)],
) -> Result<AprioriReport> {
    if c_universal < 1.0 {
        return Err(Error::InvalidArgument("c_universal must be >= 1".into()));
    }
    let ensemble = pair.y.ensemble();
    let features = default_state_features(ensemble);
    let n_paths = ensemble.n_paths();
    let a_const = cert.kappa.linear_bound_a().max(1.0);
    let c = c_universal;

    let mut probes = Vec::new();
    for &node in probe_nodes {
        let c1 = 4.0 * c * c * a_const * a_const
            * (2.0 * c * a_const * budget_sup(cert, node, true)).exp();
        let c2 = 4.0 * c * c * (2.0 * c * budget_sup(cert, node, false)).exp();

        let (lhs_payload, rhs_plain_payload) = tail_sums(pair, cert, false, node);
        let (_, rhs_weighted_payload) = tail_sums(pair, cert, true, node);

        let (lhs_cond, lhs_fit) =
            regress_at_node(&features, node, &lhs_payload, 1, estimator)?;
        let (rhs_p_cond, rhs_p_fit) =
            regress_at_node(&features, node, &rhs_plain_payload, 1, estimator)?;
        let (rhs_w_cond, rhs_w_fit) =
            regress_at_node(&features, node, &rhs_weighted_payload, 1, estimator)?;
        let se = lhs_fit.standard_error(0)
            + rhs_p_fit.standard_error(0).max(rhs_w_fit.standard_error(0));

        let mut ok_p = 0usize;
        let mut ok_w = 0usize;
        let mut worst_p = f64::INFINITY;
        let mut worst_w = f64::INFINITY;
        for path in 0..n_paths {
            let margin_p = c1 * rhs_p_cond[path] - lhs_cond[path];
            let margin_w = c2 * rhs_w_cond[path] - lhs_cond[path];
            worst_p = worst_p.min(margin_p);
            worst_w = worst_w.min(margin_w);
            if margin_p >= -3.0 * se {
                ok_p += 1;
            }
            if margin_w >= -3.0 * se {
                ok_w += 1;
            }
        }
        probes.push(AprioriProbe {
            node,
            c1,
            c2,
            fraction_plain: ok_p as f64 / n_paths as f64,
            fraction_weighted: ok_w as f64 / n_paths as f64,
            worst_margin_plain: worst_p,
            worst_margin_weighted: worst_w,
            standard_error: se,
        });
    }

    // stopping windows: y masked to 1_{sigma <= s} y_{s ^ tau}, z and f to
    // 1_{sigma <= s <= tau}; bounds hold with full-interval constants and
    // |y_tau|^2 in place of the terminal term, checked at the root node
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let c1_full = 4.0 * c * c * a_const * a_const
        * (2.0 * c * a_const * budget_sup(cert, 0, true)).exp();
    let c2_full = 4.0 * c * c * (2.0 * c * budget_sup(cert, 0, false)).exp();
    let mu_budget_sup = {
        let mut sup = 0.0_f64;
        for path in 0..n_paths {
            let mut acc = 0.0;
            for step in 0..n {
                acc += cert.mu.scalar(path, step) * grid.dt(step);
            }
            sup = sup.max(acc);
        }
        sup
    };
    let mut window_reports = Vec::new();
    for (w_idx, (sigma, tau)) in windows.iter().enumerate() {
        let mut lhs_sum = 0.0;
        let mut rhs_p_sum = 0.0;
        let mut rhs_w_sum = 0.0;
        let mut lhs_sq = 0.0;
        let mut rhs_sq = 0.0;
        for path in 0..n_paths {
            let s_idx = sigma.index(path).min(tau.index(path));
            let t_idx = tau.index(path);
            let mut sup_y = 0.0_f64;
            for node in s_idx..=n {
                let y = pair.y.value(path, node.min(t_idx));
                sup_y = sup_y.max(y.iter().map(|x| x * x).sum());
            }
            let mut z_int = 0.0;
            let mut f_int = 0.0;
            let mut mu_k_int = 0.0;
            for step in s_idx..t_idx.min(n) {
                let dt = grid.dt(step);
                let z = pair.z.value(path, step);
                z_int += z.iter().map(|x| x * x).sum::<f64>() * dt;
                f_int += cert.f.scalar(path, step) * dt;
                let y = pair.y.value(path, step.min(t_idx));
                let y_sq: f64 = y.iter().map(|x| x * x).sum();
                mu_k_int += cert.mu.scalar(path, step) * cert.kappa.eval(y_sq) * dt;
            }
            let y_tau = pair.y.value(path, t_idx);
            let y_tau_sq: f64 = y_tau.iter().map(|x| x * x).sum();
            let lhs = sup_y + z_int;
            let rhs_p = y_tau_sq + mu_budget_sup + f_int * f_int;
            let rhs_w = y_tau_sq + mu_k_int + f_int * f_int;
            lhs_sum += lhs;
            rhs_p_sum += rhs_p;
            rhs_w_sum += rhs_w;
            lhs_sq += lhs * lhs;
            rhs_sq += rhs_p * rhs_p;
        }
        let m = n_paths as f64;
        let lhs_mean = lhs_sum / m;
        let rhs_p_mean = rhs_p_sum / m;
        let rhs_w_mean = rhs_w_sum / m;
        let lhs_se = ((lhs_sq / m - lhs_mean * lhs_mean).max(0.0) / m).sqrt();
        let rhs_se = ((rhs_sq / m - rhs_p_mean * rhs_p_mean).max(0.0) / m).sqrt();
        let se = lhs_se + rhs_se;
        window_reports.push(AprioriWindowProbe {
            label: format!("window {w_idx}"),
            lhs: lhs_mean,
            rhs_plain: c1_full * rhs_p_mean,
            rhs_weighted: c2_full * rhs_w_mean,
            standard_error: se,
            satisfied_plain: lhs_mean <= c1_full * rhs_p_mean + 3.0 * se,
            satisfied_weighted: lhs_mean <= c2_full * rhs_w_mean + 3.0 * se,
        });
    }

    Ok(AprioriReport {
        probes,
        windows: window_reports,
    })
}
