//! Brownian ensembles, adapted processes, stopping times and the norms that
//! measure them.
//!
//! Everything downstream (regression, solver, inequality checks) lives on a
//! fixed [`PathEnsemble`]: a seeded bundle of Brownian increments that plays
//! the role of the empirical probability space. All time integrals are
//! left-endpoint Riemann sums, which keeps every derived process adapted.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative slack used when a running sum is compared against a hitting
/// level, so that exact-arithmetic ties are not lost to rounding.
const HIT_EPS: f64 = 1e-9;

/// Discrete partition of `[0, horizon]` on which all processes live.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be positive".into()));
        }
        let mut nodes: Vec<f64> = (0..=n_steps)
            .map(|i| horizon * i as f64 / n_steps as f64)
            .collect();
        nodes[0] = 0.0;
        nodes[n_steps] = horizon;
        Ok(Self { nodes })
    }

    /// Grid from explicit nodes; must be strictly increasing, start at 0.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument("need at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("first node must be exactly 0".into()));
        }
        if !nodes.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Step length `t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.n_steps()).map(|i| self.dt(i)).fold(0.0, f64::max)
    }
}

/// Seeded bundle of Brownian paths: the empirical probability space.
///
/// Increments are stored row-major per path (`path, step, component`). Path
/// `p` draws from its own ChaCha stream, so generation is bit-identical at
/// any parallelism degree.
#[derive(Debug)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
    increments: Vec<f64>,
}

/// Simulates a Brownian ensemble on the grid. Increment `i` has variance
/// `t_{i+1} - t_i` per component and paths are mutually independent.
pub fn simulate_brownian(
    grid: &TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
) -> Result<Arc<PathEnsemble>> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be >= 1".into()));
    }
    let n_steps = grid.n_steps();
    let sqrt_dt: Vec<f64> = (0..n_steps).map(|i| grid.dt(i).sqrt()).collect();
    let stride = n_steps * dim;
    let mut increments = vec![0.0; n_paths * stride];
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(path, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64 + 1);
            for step in 0..n_steps {
                for c in 0..dim {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    chunk[step * dim + c] = g * sqrt_dt[step];
                }
            }
        });
    Ok(Arc::new(PathEnsemble {
        grid: grid.clone(),
        n_paths,
        dim,
        seed,
        increments,
    }))
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increment vector for `(path, step)`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.n_steps() + step) * self.dim;
        &self.increments[base..base + self.dim]
    }

    pub(crate) fn from_parts(
        grid: TimeGrid,
        n_paths: usize,
        dim: usize,
        seed: u64,
        increments: Vec<f64>,
    ) -> Arc<Self> {
        assert_eq!(increments.len(), n_paths * grid.n_steps() * dim);
        Arc::new(Self {
            grid,
            n_paths,
            dim,
            seed,
            increments,
        })
    }

    /// Brownian values as an adapted process: `B_0 = 0`, node `i` sums the
    /// increments with index `< i`.
    pub fn brownian(self: &Arc<Self>) -> AdaptedProcess {
        let n = self.n_steps();
        let d = self.dim;
        let values = build_values(self, d, |path, out| {
            for c in 0..d {
                out[c] = 0.0;
            }
            for i in 0..n {
                let inc = self.increment(path, i);
                for c in 0..d {
                    out[(i + 1) * d + c] = out[i * d + c] + inc[c];
                }
            }
        });
        AdaptedProcess {
            ensemble: Arc::clone(self),
            dim_out: d,
            values,
        }
    }
}

fn build_values<F>(ensemble: &Arc<PathEnsemble>, dim_out: usize, fill: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let stride = (ensemble.n_steps() + 1) * dim_out;
    let mut values = vec![0.0; ensemble.n_paths() * stride];
    values
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(path, chunk)| fill(path, chunk));
    values
}

/// Per-path, per-node values of a progressively measurable process.
#[derive(Debug, Clone)]
pub struct AdaptedProcess {
    ensemble: Arc<PathEnsemble>,
    dim_out: usize,
    values: Vec<f64>,
}

impl AdaptedProcess {
    /// Builds a process from a per-path closure filling all node values.
    /// The closure must only consult increments with index `< node` when
    /// writing node `node`; [`permute_future_test`] can audit this.
    pub fn from_path_fn<F>(ensemble: &Arc<PathEnsemble>, dim_out: usize, fill: F) -> Self
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let values = build_values(ensemble, dim_out, fill);
        Self {
            ensemble: Arc::clone(ensemble),
            dim_out,
            values,
        }
    }

    /// Wraps precomputed node values (row-major `path, node, component`).
    pub fn from_values(
        ensemble: &Arc<PathEnsemble>,
        dim_out: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != ensemble.n_paths() * (ensemble.n_steps() + 1) * dim_out {
            return Err(Error::InvalidArgument("value buffer size mismatch".into()));
        }
        Ok(Self {
            ensemble: Arc::clone(ensemble),
            dim_out,
            values,
        })
    }

    /// Scalar process constant over paths and nodes.
    pub fn constant(ensemble: &Arc<PathEnsemble>, value: f64) -> Self {
        Self::from_path_fn(ensemble, 1, |_, out| out.fill(value))
    }

    /// Applies a pointwise map to a scalar process.
    pub fn map_scalar(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        assert_eq!(self.dim_out, 1);
        Self::from_path_fn(&self.ensemble, 1, |path, out| {
            for (i, slot) in out.iter_mut().enumerate() {
                *slot = f(self.values[path * (self.n_nodes()) + i]);
            }
        })
    }

    /// Euclidean norm of the value vector, as a scalar process.
    pub fn euclidean_norm(&self) -> Self {
        Self::from_path_fn(&self.ensemble, 1, |path, out| {
            for (i, slot) in out.iter_mut().enumerate() {
                let v = self.value(path, i);
                *slot = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
        })
    }

    /// Left-endpoint running integral of a scalar process:
    /// node `i` holds the sum of `value(j) * dt_j` over steps `j < i`.
    pub fn running_integral(&self) -> Self {
        assert_eq!(self.dim_out, 1);
        let grid = self.ensemble.grid().clone();
        let n = grid.n_steps();
        Self::from_path_fn(&self.ensemble, 1, |path, out| {
            out[0] = 0.0;
            for i in 0..n {
                out[i + 1] = out[i] + self.scalar(path, i) * grid.dt(i);
            }
        })
    }

    pub fn ensemble(&self) -> &Arc<PathEnsemble> {
        &self.ensemble
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn n_nodes(&self) -> usize {
        self.ensemble.n_steps() + 1
    }

    pub fn value(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.n_nodes() + node) * self.dim_out;
        &self.values[base..base + self.dim_out]
    }

    /// Scalar accessor (requires `dim_out == 1`).
    pub fn scalar(&self, path: usize, node: usize) -> f64 {
        debug_assert_eq!(self.dim_out, 1);
        self.values[path * self.n_nodes() + node]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_ensemble(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.ensemble, &other.ensemble)
    }

    /// Scales every value by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v *= lambda;
        }
        out
    }
}

/// Per-path stopping node: the event `{stop_index <= i}` is decided by
/// increments with index `< i`.
#[derive(Debug, Clone)]
pub struct StoppingTimeField {
    ensemble: Arc<PathEnsemble>,
    stop_index: Vec<usize>,
}

impl StoppingTimeField {
    pub fn new(ensemble: &Arc<PathEnsemble>, stop_index: Vec<usize>) -> Result<Self> {
        if stop_index.len() != ensemble.n_paths() {
            return Err(Error::InvalidArgument("one stop index per path required".into()));
        }
        let n = ensemble.n_steps();
        if stop_index.iter().any(|&s| s > n) {
            return Err(Error::InvalidArgument("stop index beyond the grid".into()));
        }
        Ok(Self {
            ensemble: Arc::clone(ensemble),
            stop_index,
        })
    }

    /// The degenerate stopping time `tau = T` on every path.
    pub fn terminal(ensemble: &Arc<PathEnsemble>) -> Self {
        Self {
            ensemble: Arc::clone(ensemble),
            stop_index: vec![ensemble.n_steps(); ensemble.n_paths()],
        }
    }

    pub fn ensemble(&self) -> &Arc<PathEnsemble> {
        &self.ensemble
    }

    pub fn stop_index(&self) -> &[usize] {
        &self.stop_index
    }

    pub fn index(&self, path: usize) -> usize {
        self.stop_index[path]
    }
}

/// First grid node at which the left-endpoint Riemann sum of
/// `integrand^power` reaches `level`; `n_steps` when it never does
/// (the `inf emptyset ^ T` convention).
pub fn hitting_time(
    integrand: &AdaptedProcess,
    level: f64,
    power: u32,
) -> Result<StoppingTimeField> {
    if integrand.dim_out() != 1 {
        return Err(Error::InvalidArgument("hitting integrand must be scalar".into()));
    }
    if !(power == 1 || power == 2) {
        return Err(Error::InvalidArgument("power must be 1 or 2".into()));
    }
    let ensemble = integrand.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let slack = HIT_EPS * level.abs().max(1.0);
    let mut stop_index = vec![n; ensemble.n_paths()];
    for path in 0..ensemble.n_paths() {
        let mut acc = 0.0;
        if acc >= level - slack {
            stop_index[path] = 0;
            continue;
        }
        for i in 0..n {
            let v = integrand.scalar(path, i);
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "negative integrand {v} at path {path}, node {i}"
                )));
            }
            acc += if power == 1 { v } else { v * v } * grid.dt(i);
            if acc >= level - slack {
                stop_index[path] = i + 1;
                break;
            }
        }
    }
    StoppingTimeField::new(ensemble, stop_index)
}

/// The norms and pathwise budgets of a `(Y, Z)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    /// `sqrt(mean over paths of sup over nodes |Y|^2)`.
    pub s2_norm: f64,
    /// `sqrt(mean over paths of sum |Z|^2 dt)`.
    pub m2_norm: f64,
    /// `sqrt(mean over paths of (sum |Z| dt)^2)`.
    pub h2_norm: f64,
    /// Max over paths of `sum |Y| dt` (lower-biased ess-sup estimate).
    pub esssup_budget_l1: f64,
    /// Max over paths of `sum |Z|^2 dt` (lower-biased ess-sup estimate).
    pub esssup_budget_l2: f64,
    /// Max over stopping candidates of the pathwise tail of `sum |Z|^2 dt`;
    /// an upper proxy for the conditional-expectation BMO quantity.
    pub bmo_norm: f64,
    /// Paths behind the ess-sup estimates.
    pub n_paths: usize,
}

/// Computes all norms of the pair `(Y, Z)` on their common ensemble.
pub fn norms(y: &AdaptedProcess, z: &AdaptedProcess) -> Result<NormReport> {
    if !y.same_ensemble(z) {
        return Err(Error::EnsembleMismatch);
    }
    let ensemble = y.ensemble();
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let mut sum_sup2 = 0.0;
    let mut sum_m2 = 0.0;
    let mut sum_h2 = 0.0;
    let mut l1 = 0.0_f64;
    let mut l2 = 0.0_f64;
    let mut bmo = 0.0_f64;
    for path in 0..n_paths {
        let mut sup2 = 0.0_f64;
        for node in 0..=n {
            let v = y.value(path, node);
            let q: f64 = v.iter().map(|x| x * x).sum();
            sup2 = sup2.max(q);
        }
        let mut z2_int = 0.0;
        let mut z1_int = 0.0;
        let mut y1_int = 0.0;
        for i in 0..n {
            let dt = grid.dt(i);
            let zv = z.value(path, i);
            let zq: f64 = zv.iter().map(|x| x * x).sum();
            z2_int += zq * dt;
            z1_int += zq.sqrt() * dt;
            let yv = y.value(path, i);
            let yq: f64 = yv.iter().map(|x| x * x).sum::<f64>().sqrt();
            y1_int += yq * dt;
        }
        sum_sup2 += sup2;
        sum_m2 += z2_int;
        sum_h2 += z1_int * z1_int;
        l1 = l1.max(y1_int);
        l2 = l2.max(z2_int);
        // tail sums are maximal at node 0, so over grid-node candidates the
        // pathwise proxy coincides with the full-interval budget
        bmo = bmo.max(z2_int);
    }
    let m = n_paths as f64;
    Ok(NormReport {
        s2_norm: (sum_sup2 / m).sqrt(),
        m2_norm: (sum_m2 / m).sqrt(),
        h2_norm: (sum_h2 / m).sqrt(),
        esssup_budget_l1: l1,
        esssup_budget_l2: l2,
        bmo_norm: bmo,
        n_paths,
    })
}

/// Adaptedness audit: rebuilds `process` on an ensemble whose increments at
/// steps `>= node_index` were permuted across paths, and reports whether the
/// values at nodes `<= node_index` are unchanged on every path.
pub fn permute_future_test<F>(
    ensemble: &Arc<PathEnsemble>,
    node_index: usize,
    seed: u64,
    build: F,
) -> bool
where
    F: Fn(&Arc<PathEnsemble>) -> AdaptedProcess,
{
    let n = ensemble.n_steps();
    assert!(node_index <= n);
    let original = build(ensemble);
    let permuted = build(&permute_future(ensemble, node_index, seed));
    let d = original.dim_out();
    for path in 0..ensemble.n_paths() {
        for node in 0..=node_index {
            let a = original.value(path, node);
            let b = permuted.value(path, node);
            for c in 0..d {
                if a[c].to_bits() != b[c].to_bits() {
                    return false;
                }
            }
        }
    }
    true
}

fn permute_future(ensemble: &Arc<PathEnsemble>, node_index: usize, seed: u64) -> Arc<PathEnsemble> {
    use rand::seq::SliceRandom;
    let n = ensemble.n_steps();
    let d = ensemble.dim();
    let n_paths = ensemble.n_paths();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut perm: Vec<usize> = (0..n_paths).collect();
    perm.shuffle(&mut rng);
    let mut increments = ensemble.increments().to_vec();
    for step in node_index..n {
        for path in 0..n_paths {
            let src = (perm[path] * n + step) * d;
            let dst = (path * n + step) * d;
            for c in 0..d {
                increments[dst + c] = ensemble.increments()[src + c];
            }
        }
    }
    PathEnsemble::from_parts(
        ensemble.grid().clone(),
        n_paths,
        d,
        ensemble.seed(),
        increments,
    )
}
