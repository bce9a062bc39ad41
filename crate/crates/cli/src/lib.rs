//! Experiment runner: parses a TOML config, wires the core modules, and
//! emits a JSON manifest plus CSV/binary artifacts.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use bsde_core::conditional::CondExpEstimator;
use bsde_core::generators::{
    check_a, check_h1, check_h2, check_h3, check_h4, example46_fields, generator_by_name,
    make_discontinuous_sign, make_unmonotone_square, nondomination_probe, GeneratorSpec,
};
use bsde_core::inequalities::{
    bihari_check, bmo_diagnostic, gronwall_check, make_saturated_bihari,
    make_saturated_gronwall,
};
use bsde_core::io::{write_ensemble, write_process_csv};
use bsde_core::paths::{
    simulate_brownian, AdaptedProcess, PathEnsemble, StoppingTimeField, TimeGrid,
};
use bsde_core::rho_by_name;
use bsde_core::solver::{
    apriori_check, build_partition, picard_solve, random_terminal_invariant, residual_check,
    solve_random_terminal, solve_z_independent, SolutionPair, SolverConfig, TerminalCondition,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    SolveRandomTerminal,
    VerifyGronwall,
    VerifyBihari,
    VerifyAssumptions,
    VerifyEstimates,
    RefineStudy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub n_paths: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub grid: GridSpec,
    pub ensemble: EnsembleSpec,
    /// Registry name: "zero", "linear:a,b", "example46:M,delta".
    pub generator: Option<String>,
    /// Terminal preset: "brownian", "one", "brownian_squared", "sin_cos",
    /// "constant:c".
    pub terminal: Option<String>,
    /// Stop preset for random-terminal solves: "terminal", "exit:level",
    /// "node:index".
    pub tau: Option<String>,
    /// Modulus preset: "identity", "h:delta", "linear:slope".
    pub rho: Option<String>,
    /// Constant of the modulus hypothesis.
    pub c: Option<f64>,
    /// Coefficient preset for inequality instances: "constant:b",
    /// "stopped_abs:M".
    pub beta: Option<String>,
    pub n_instances: Option<usize>,
    pub n_samples: Option<usize>,
    pub steps_ladder: Option<Vec<usize>>,
    #[serde(default)]
    pub estimator: CondExpEstimator,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).context("config parse failed")?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.grid.n_steps == 0 || self.grid.horizon <= 0.0 {
            bail!("grid: horizon must be positive and n_steps >= 1");
        }
        if self.ensemble.n_paths == 0 || self.ensemble.dim == 0 {
            bail!("ensemble: n_paths and dim must be >= 1");
        }
        match self.kind {
            ExperimentKind::Solve | ExperimentKind::VerifyEstimates => {
                let terminal = self.terminal.as_deref().unwrap_or("brownian");
                let k = terminal_k(terminal)?;
                let name = self.generator.as_deref().unwrap_or("zero");
                generator_by_name(name, k).map_err(|e| anyhow!("generator: {e}"))?;
            }
            ExperimentKind::SolveRandomTerminal => {
                let terminal = self.terminal.as_deref().unwrap_or("brownian");
                terminal_k(terminal)?;
                parse_tau_spec(self.tau.as_deref().unwrap_or("terminal"))?;
            }
            ExperimentKind::VerifyBihari => {
                let rho = self.rho.as_deref().unwrap_or("identity");
                rho_by_name(rho).map_err(|e| anyhow!("rho: {e}"))?;
                parse_beta_spec(self.beta.as_deref().unwrap_or("constant:1"))?;
            }
            ExperimentKind::VerifyGronwall => {
                parse_beta_spec(self.beta.as_deref().unwrap_or("constant:0.5"))?;
            }
            ExperimentKind::VerifyAssumptions => {
                let name = self.generator.as_deref().unwrap_or("example46:1,0.1");
                let k = if name.starts_with("example46") { 2 } else { 1 };
                generator_by_name(name, k).map_err(|e| anyhow!("generator: {e}"))?;
            }
            ExperimentKind::RefineStudy => {
                let ladder = self
                    .steps_ladder
                    .clone()
                    .unwrap_or_else(|| vec![25, 50, 100]);
                if ladder.len() < 2 || ladder.windows(2).any(|w| w[1] <= w[0]) {
                    bail!("steps_ladder must be strictly increasing with >= 2 entries");
                }
            }
        }
        Ok(())
    }
}

/// Phase timings recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub passed: bool,
    pub reports: serde_json::Value,
    pub phases: Vec<Phase>,
}

struct PhaseClock {
    phases: Vec<Phase>,
    last: Instant,
}

impl PhaseClock {
    fn new() -> Self {
        Self {
            phases: Vec::new(),
            last: Instant::now(),
        }
    }

    fn mark(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.push(Phase {
            name: name.to_string(),
            seconds: now.duration_since(self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

fn terminal_k(name: &str) -> anyhow::Result<usize> {
    match name {
        "brownian" | "one" | "brownian_squared" => Ok(1),
        "sin_cos" => Ok(2),
        _ if name.starts_with("constant:") => {
            name["constant:".len()..]
                .parse::<f64>()
                .map_err(|_| anyhow!("bad constant terminal {name:?}"))?;
            Ok(1)
        }
        _ => bail!("unknown terminal preset {name:?}"),
    }
}

fn terminal_values(ensemble: &Arc<PathEnsemble>, name: &str, node_of: &dyn Fn(usize) -> usize) -> anyhow::Result<Vec<f64>> {
    let b = ensemble.brownian();
    let n_paths = ensemble.n_paths();
    let mut out = Vec::new();
    match name {
        "brownian" => {
            for p in 0..n_paths {
                out.push(b.value(p, node_of(p))[0]);
            }
        }
        "one" => out = vec![1.0; n_paths],
        "brownian_squared" => {
            for p in 0..n_paths {
                out.push(b.value(p, node_of(p))[0].powi(2));
            }
        }
        "sin_cos" => {
            for p in 0..n_paths {
                let x = b.value(p, node_of(p))[0];
                out.push(x.sin());
                out.push(x.cos());
            }
        }
        _ if name.starts_with("constant:") => {
            let c: f64 = name["constant:".len()..].parse().unwrap();
            out = vec![c; n_paths];
        }
        _ => bail!("unknown terminal preset {name:?}"),
    }
    Ok(out)
}

fn build_terminal(
    ensemble: &Arc<PathEnsemble>,
    name: &str,
) -> anyhow::Result<TerminalCondition> {
    let k = terminal_k(name)?;
    let n = ensemble.n_steps();
    let values = terminal_values(ensemble, name, &|_| n)?;
    Ok(TerminalCondition::new(k, values)?)
}

enum TauSpec {
    Terminal,
    Exit(f64),
    Node(usize),
}

fn parse_tau_spec(name: &str) -> anyhow::Result<TauSpec> {
    if name == "terminal" {
        return Ok(TauSpec::Terminal);
    }
    if let Some(rest) = name.strip_prefix("exit:") {
        let level: f64 = rest.parse().map_err(|_| anyhow!("bad exit level {rest:?}"))?;
        if level <= 0.0 {
            bail!("exit level must be positive");
        }
        return Ok(TauSpec::Exit(level));
    }
    if let Some(rest) = name.strip_prefix("node:") {
        let idx: usize = rest.parse().map_err(|_| anyhow!("bad node index {rest:?}"))?;
        return Ok(TauSpec::Node(idx));
    }
    bail!("unknown tau preset {name:?}")
}

fn build_tau(ensemble: &Arc<PathEnsemble>, spec: &TauSpec) -> StoppingTimeField {
    match spec {
        TauSpec::Terminal => StoppingTimeField::terminal(ensemble),
        TauSpec::Exit(level) => {
            let b = ensemble.brownian();
            let n = ensemble.n_steps();
            let idx: Vec<usize> = (0..ensemble.n_paths())
                .map(|p| {
                    (0..=n)
                        .find(|&m| b.value(p, m)[0].abs() >= *level)
                        .unwrap_or(n)
                })
                .collect();
            StoppingTimeField::new(ensemble, idx).expect("indices in range")
        }
        TauSpec::Node(idx) => {
            let n = ensemble.n_steps();
            StoppingTimeField::new(ensemble, vec![(*idx).min(n); ensemble.n_paths()])
                .expect("indices in range")
        }
    }
}

enum BetaSpec {
    Constant(f64),
    StoppedAbs(f64),
}

fn parse_beta_spec(name: &str) -> anyhow::Result<BetaSpec> {
    if let Some(rest) = name.strip_prefix("constant:") {
        let b: f64 = rest.parse().map_err(|_| anyhow!("bad beta constant {rest:?}"))?;
        if b < 0.0 {
            bail!("beta must be nonnegative");
        }
        return Ok(BetaSpec::Constant(b));
    }
    if let Some(rest) = name.strip_prefix("stopped_abs:") {
        let m: f64 = rest.parse().map_err(|_| anyhow!("bad budget {rest:?}"))?;
        if m <= 0.0 {
            bail!("budget must be positive");
        }
        return Ok(BetaSpec::StoppedAbs(m));
    }
    bail!("unknown beta preset {name:?}")
}

fn build_beta(ensemble: &Arc<PathEnsemble>, spec: &BetaSpec) -> anyhow::Result<AdaptedProcess> {
    match spec {
        BetaSpec::Constant(b) => Ok(AdaptedProcess::constant(ensemble, *b)),
        BetaSpec::StoppedAbs(m) => {
            let fields = example46_fields(ensemble, *m)?;
            Ok(fields.u_bar)
        }
    }
}

/// Closed-form reference pair for the oracle generator/terminal combos.
fn closed_form(
    generator: &str,
    terminal: &str,
    ensemble: &Arc<PathEnsemble>,
) -> Option<(AdaptedProcess, AdaptedProcess)> {
    if ensemble.dim() != 1 {
        return None;
    }
    let grid = ensemble.grid().clone();
    let horizon = grid.horizon();
    let b = ensemble.brownian();
    let n = ensemble.n_steps();
    let (a, bz) = if generator == "zero" {
        (0.0, 0.0)
    } else if let Some(rest) = generator.strip_prefix("linear:") {
        let mut it = rest.split(',');
        let a: f64 = it.next()?.trim().parse().ok()?;
        let bz: f64 = it.next()?.trim().parse().ok()?;
        (a, bz)
    } else {
        return None;
    };
    match terminal {
        "brownian" if bz == 0.0 => {
            // y = e^{a (T - t)} B_t, z = e^{a (T - t)}
            let y = AdaptedProcess::from_path_fn(ensemble, 1, |p, out| {
                for m in 0..=n {
                    out[m] = (a * (horizon - grid.node(m))).exp() * b.value(p, m)[0];
                }
            });
            let z = AdaptedProcess::from_path_fn(ensemble, 1, |_, out| {
                for m in 0..=n {
                    out[m] = (a * (horizon - grid.node(m))).exp();
                }
            });
            Some((y, z))
        }
        "brownian" if a == 0.0 => {
            // y = B_t + bz (T - t), z = 1
            let y = AdaptedProcess::from_path_fn(ensemble, 1, |p, out| {
                for m in 0..=n {
                    out[m] = b.value(p, m)[0] + bz * (horizon - grid.node(m));
                }
            });
            Some((y, AdaptedProcess::constant(ensemble, 1.0)))
        }
        "one" if bz == 0.0 => {
            let y = AdaptedProcess::from_path_fn(ensemble, 1, |_, out| {
                for m in 0..=n {
                    out[m] = (a * (horizon - grid.node(m))).exp();
                }
            });
            Some((y, AdaptedProcess::constant(ensemble, 0.0)))
        }
        "brownian_squared" if a == 0.0 && bz == 0.0 => {
            let y = AdaptedProcess::from_path_fn(ensemble, 1, |p, out| {
                for m in 0..=n {
                    out[m] = b.value(p, m)[0].powi(2) + (horizon - grid.node(m));
                }
            });
            let z = AdaptedProcess::from_path_fn(ensemble, 1, |p, out| {
                for m in 0..=n {
                    out[m] = 2.0 * b.value(p, m)[0];
                }
            });
            Some((y, z))
        }
        _ => None,
    }
}

/// Relative errors of a solve against a reference pair: sup-type norm for
/// y, square-integral norm for z, each over the reference's own scale.
pub fn relative_errors(
    pair: &SolutionPair,
    y_ref: &AdaptedProcess,
    z_ref: &AdaptedProcess,
) -> (f64, f64) {
    let ensemble = pair.y.ensemble();
    let grid = ensemble.grid();
    let n = ensemble.n_steps();
    let n_paths = ensemble.n_paths();
    let ky = pair.y.dim_out();
    let kz = pair.z.dim_out();
    let mut err_y = 0.0;
    let mut ref_y = 0.0;
    let mut err_z = 0.0;
    let mut ref_z = 0.0;
    for p in 0..n_paths {
        let mut sup_e = 0.0_f64;
        let mut sup_r = 0.0_f64;
        for m in 0..=n {
            let va = pair.y.value(p, m);
            let vb = y_ref.value(p, m);
            let mut e = 0.0;
            let mut r = 0.0;
            for a in 0..ky {
                e += (va[a] - vb[a]).powi(2);
                r += vb[a] * vb[a];
            }
            sup_e = sup_e.max(e);
            sup_r = sup_r.max(r);
        }
        err_y += sup_e;
        ref_y += sup_r;
        for m in 0..n {
            let za = pair.z.value(p, m);
            let zb = z_ref.value(p, m);
            let mut e = 0.0;
            let mut r = 0.0;
            for a in 0..kz {
                e += (za[a] - zb[a]).powi(2);
                r += zb[a] * zb[a];
            }
            err_z += e * grid.dt(m);
            ref_z += r * grid.dt(m);
        }
    }
    let m = n_paths as f64;
    let y_scale = (ref_y / m).sqrt();
    // degenerate z references fall back to the y scale
    let z_scale = (ref_z / m).sqrt().max(y_scale * 1e-3);
    (
        (err_y / m).sqrt() / y_scale.max(1e-12),
        (err_z / m).sqrt() / z_scale.max(1e-12),
    )
}

fn solve_with_config(
    prep: &bsde_core::PreparedGenerator,
    xi: &TerminalCondition,
    config: &ExperimentConfig,
) -> anyhow::Result<(SolutionPair, serde_json::Value)> {
    let partition = build_partition(prep, config.solver.n_blocks, config.solver.c_universal)?;
    let summary = serde_json::to_value(&partition.summary)?;
    let pair = if prep.spec.z_dependent() {
        picard_solve(prep, xi, &partition, &config.solver)?
    } else {
        solve_z_independent(prep, xi, &config.solver)?
    };
    Ok((pair, summary))
}

fn run_solve(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let grid = TimeGrid::uniform(config.grid.horizon, config.grid.n_steps)?;
    let ensemble = simulate_brownian(
        &grid,
        config.ensemble.n_paths,
        config.ensemble.dim,
        config.seed,
    )?;
    clock.mark("simulate");
    let terminal_name = config.terminal.as_deref().unwrap_or("brownian");
    let generator_name = config.generator.as_deref().unwrap_or("zero");
    let k = terminal_k(terminal_name)?;
    let spec = generator_by_name(generator_name, k)?;
    let prep = spec.prepare(&ensemble);
    let xi = build_terminal(&ensemble, terminal_name)?;
    let (pair, partition) = solve_with_config(&prep, &xi, config)?;
    clock.mark("solve");
    let residual = residual_check(&prep, &pair)?;
    clock.mark("residual");

    let mut y0 = vec![0.0; k];
    for p in 0..ensemble.n_paths() {
        for a in 0..k {
            y0[a] += pair.y.value(p, 0)[a];
        }
    }
    for v in &mut y0 {
        *v /= ensemble.n_paths() as f64;
    }

    let oracle = closed_form(generator_name, terminal_name, &ensemble).map(|(y_ref, z_ref)| {
        let (ey, ez) = relative_errors(&pair, &y_ref, &z_ref);
        json!({"y_rel_error": ey, "z_rel_error": ez})
    });
    let oracle_ok = oracle
        .as_ref()
        .map(|o| {
            o["y_rel_error"].as_f64().unwrap() < 0.05 && o["z_rel_error"].as_f64().unwrap() < 0.05
        })
        .unwrap_or(true);

    write_ensemble(&out_dir.join("fields.bin"), &ensemble)?;
    write_process_csv(&out_dir.join("y.csv"), &pair.y)?;
    write_process_csv(&out_dir.join("z.csv"), &pair.z)?;
    clock.mark("export");

    let passed = pair.report.converged && residual.s2_norm.is_finite() && oracle_ok;
    Ok((
        passed,
        json!({
            "picard": serde_json::to_value(&pair.report)?,
            "partition": partition,
            "residual": serde_json::to_value(&residual)?,
            "y0_mean": y0,
            "oracle": oracle,
        }),
    ))
}

fn run_solve_random_terminal(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let grid = TimeGrid::uniform(config.grid.horizon, config.grid.n_steps)?;
    let ensemble = simulate_brownian(
        &grid,
        config.ensemble.n_paths,
        config.ensemble.dim,
        config.seed,
    )?;
    clock.mark("simulate");
    let terminal_name = config.terminal.as_deref().unwrap_or("brownian").to_string();
    let generator_name = config.generator.as_deref().unwrap_or("zero");
    let k = terminal_k(&terminal_name)?;
    let spec = generator_by_name(generator_name, k)?;
    let prep = spec.prepare(&ensemble);
    let tau_spec = parse_tau_spec(config.tau.as_deref().unwrap_or("terminal"))?;
    let partition = build_partition(&prep, config.solver.n_blocks, config.solver.c_universal)?;
    let tname = terminal_name.clone();
    let pair = solve_random_terminal(
        &prep,
        |e| build_tau(e, &tau_spec),
        move |e, tau| {
            terminal_values(e, &tname, &|p| tau.index(p)).expect("validated preset")
        },
        &partition,
        &config.solver,
        config.seed ^ 0x9e37_79b9,
    )?;
    clock.mark("solve");
    let tau = build_tau(&ensemble, &tau_spec);
    let xi = TerminalCondition::new(
        k,
        terminal_values(&ensemble, &terminal_name, &|p| tau.index(p))?,
    )?;
    let invariant = random_terminal_invariant(&pair, &tau, &xi);

    write_ensemble(&out_dir.join("fields.bin"), &ensemble)?;
    write_process_csv(&out_dir.join("y.csv"), &pair.y)?;
    write_process_csv(&out_dir.join("z.csv"), &pair.z)?;
    clock.mark("export");

    let passed = pair.report.converged && invariant;
    Ok((
        passed,
        json!({
            "picard": serde_json::to_value(&pair.report)?,
            "stopped_invariant": invariant,
        }),
    ))
}

fn run_verify_gronwall(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let grid = TimeGrid::uniform(config.grid.horizon, config.grid.n_steps)?;
    let ensemble = simulate_brownian(
        &grid,
        config.ensemble.n_paths,
        config.ensemble.dim,
        config.seed,
    )?;
    clock.mark("simulate");
    let n = ensemble.n_steps();
    let probe_nodes = [0, n / 4, n / 2, 3 * n / 4];
    let n_instances = config.n_instances.unwrap_or(20);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5151_5151);
    let est = &config.estimator;
    let b_term = ensemble.brownian();

    let mut instances = Vec::new();
    let mut all_pass = true;

    // deterministic saturation: the conclusion bound must reproduce the
    // classical closed form exactly
    let (b_const, c_const) = (0.5, 2.0);
    let det = make_saturated_gronwall(
        &ensemble,
        vec![c_const; ensemble.n_paths()],
        AdaptedProcess::constant(&ensemble, b_const),
        AdaptedProcess::constant(&ensemble, 0.0),
        est,
    )?;
    let det_rep = gronwall_check(&det, est, &probe_nodes)?;
    let mut closed_form_error = 0.0_f64;
    for row in &det_rep.conclusion {
        let expect = c_const * (b_const * (grid.horizon() - grid.node(row.node))).exp();
        closed_form_error = closed_form_error.max((row.bound_mean - expect).abs());
    }
    let det_ok = closed_form_error < 1e-6
        && det_rep.hypothesis_certified()
        && det_rep.min_fraction() == 1.0;
    all_pass &= det_ok;
    instances.push(json!({
        "label": "deterministic",
        "closed_form_error": closed_form_error,
        "report": serde_json::to_value(&det_rep)?,
    }));

    for i in 0..n_instances {
        let b_level: f64 = rng.random_range(0.05..0.8);
        let f_level: f64 = rng.random_range(0.0..0.5);
        let eta_scale: f64 = rng.random_range(0.2..2.0);
        let random_eta = i % 2 == 0;
        let eta: Vec<f64> = if random_eta {
            (0..ensemble.n_paths())
                .map(|p| eta_scale * b_term.value(p, n)[0].abs())
                .collect()
        } else {
            vec![eta_scale; ensemble.n_paths()]
        };
        let beta = if i % 3 == 2 {
            build_beta(&ensemble, &BetaSpec::StoppedAbs(1.0))?.scaled(b_level)
        } else {
            AdaptedProcess::constant(&ensemble, b_level)
        };
        let inst = make_saturated_gronwall(
            &ensemble,
            eta,
            beta,
            AdaptedProcess::constant(&ensemble, f_level),
            est,
        )?;
        let rep = gronwall_check(&inst, est, &probe_nodes)?;
        // stochastic terminal payloads keep the pathwise check at the
        // estimator noise floor, so those instances certify in the mean
        let ok = rep.hypothesis_certified()
            && rep.conclusion_certified()
            && (random_eta || rep.min_fraction() >= 0.99);
        all_pass &= ok;
        instances.push(json!({
            "label": format!("random {i}"),
            "passed": ok,
            "report": serde_json::to_value(&rep)?,
        }));
    }
    clock.mark("verify");

    let csv = instances_bound_csv(&instances);
    std::fs::write(out_dir.join("gronwall.csv"), csv)?;
    Ok((
        all_pass,
        json!({"instances": instances, "deterministic_ok": det_ok}),
    ))
}

fn instances_bound_csv(instances: &[serde_json::Value]) -> String {
    let mut out = String::from("instance,node,mu_mean,bound_mean,fraction\n");
    for inst in instances {
        let label = inst["label"].as_str().unwrap_or("?");
        if let Some(rows) = inst["report"]["conclusion"].as_array() {
            for row in rows {
                out.push_str(&format!(
                    "{label},{},{},{},{}\n",
                    row["node"], row["mu_mean"], row["bound_mean"], row["fraction"]
                ));
            }
        }
    }
    out
}

fn run_verify_bihari(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let grid = TimeGrid::uniform(config.grid.horizon, config.grid.n_steps)?;
    let ensemble = simulate_brownian(
        &grid,
        config.ensemble.n_paths,
        config.ensemble.dim,
        config.seed,
    )?;
    clock.mark("simulate");
    let n = ensemble.n_steps();
    let probe_nodes = [0, n / 4, n / 2, 3 * n / 4];
    let est = &config.estimator;
    let rho_name = config.rho.as_deref().unwrap_or("identity");
    let rho = rho_by_name(rho_name)?;
    let c = config.c.unwrap_or(0.05);
    let beta_spec = parse_beta_spec(config.beta.as_deref().unwrap_or("constant:1"))?;
    let beta = build_beta(&ensemble, &beta_spec)?;

    let inst = make_saturated_bihari(&ensemble, c, beta.clone(), rho.clone(), est)?;
    let rep = bihari_check(&inst, est, &probe_nodes, 1e-6)?;
    let mut passed = rep.all_satisfied();

    // identity modulus: the bound must agree with the exponential form
    let mut identity_error = None;
    if rho_name == "identity" && c > 0.0 {
        let mut worst = 0.0_f64;
        for row in &rep.probes {
            let expect = c * row.budget_sup.exp();
            worst = worst.max((row.bound.unwrap_or(f64::NAN) - expect).abs());
        }
        identity_error = Some(worst);
        passed &= worst < 1e-6;
    }

    // envelope diagnostic on the hypothesis payload
    let eta: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| {
            (0..n)
                .map(|s| beta.value(p, s)[0] * rho.eval(inst.mu.value(p, s)[0]) * grid.dt(s))
                .sum()
        })
        .collect();
    let bmo = bmo_diagnostic(&ensemble, &eta, est, &probe_nodes)?;
    passed &= bmo.diagnostic <= bmo.m_hat * bmo.m_hat + 1e-6;
    clock.mark("verify");

    let mut csv = String::from("node,budget_sup,bound,mu_max,mu_mean\n");
    for row in &rep.probes {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.node,
            row.budget_sup,
            row.bound.map(|b| b.to_string()).unwrap_or_default(),
            row.mu_max,
            row.mu_mean
        ));
    }
    std::fs::write(out_dir.join("bihari.csv"), csv)?;
    Ok((
        passed,
        json!({
            "report": serde_json::to_value(&rep)?,
            "identity_error": identity_error,
            "bmo": serde_json::to_value(&bmo)?,
        }),
    ))
}

fn run_verify_assumptions(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let grid = TimeGrid::uniform(config.grid.horizon, config.grid.n_steps)?;
    let ensemble = simulate_brownian(
        &grid,
        config.ensemble.n_paths,
        config.ensemble.dim,
        config.seed,
    )?;
    clock.mark("simulate");
    let n_samples = config.n_samples.unwrap_or(10_000);
    let seed = config.seed;

    let name = config.generator.as_deref().unwrap_or("example46:1,0.1");
    let k = if name.starts_with("example46") { 2 } else { 1 };
    let spec = generator_by_name(name, k)?;
    let checks = assumption_suite(&spec, &ensemble, n_samples, seed)?;
    let shipped_clean = checks.iter().all(|c| c["passed"].as_bool() == Some(true));
    clock.mark("shipped");

    // planted violations must be caught with a witness
    let bad_h2 = check_h2(
        &make_unmonotone_square().prepare(&ensemble),
        n_samples,
        3.0,
        1.0,
        seed,
    );
    let bad_h1 = check_h1(
        &make_discontinuous_sign().prepare(&ensemble),
        n_samples,
        1.0,
        seed,
    );
    let planted_caught =
        !bad_h2.passed && bad_h2.witness.is_some() && !bad_h1.passed && bad_h1.witness.is_some();
    clock.mark("planted");

    let nondomination = if name.starts_with("example46:") {
        let m_budget: f64 = name["example46:".len()..]
            .split(',')
            .next()
            .unwrap()
            .parse()
            .unwrap_or(1.0);
        let candidate: Vec<f64> = (0..=grid.n_steps())
            .map(|i| {
                let t = grid.node(i).max(grid.dt(0) * 0.5);
                m_budget / (4.0 * t)
            })
            .collect();
        let probe = nondomination_probe(&ensemble, m_budget, &candidate)?;
        let mut csv = String::from("t,u_tilde,threshold,violation_freq\n");
        for row in &probe.rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.t, row.u_tilde, row.threshold, row.violation_freq
            ));
        }
        std::fs::write(out_dir.join("nondomination.csv"), csv)?;
        Some(serde_json::to_value(&probe)?)
    } else {
        None
    };
    clock.mark("nondomination");

    let passed = shipped_clean && planted_caught;
    Ok((
        passed,
        json!({
            "shipped": checks,
            "planted_h2": serde_json::to_value(&bad_h2)?,
            "planted_h1": serde_json::to_value(&bad_h1)?,
            "nondomination": nondomination,
        }),
    ))
}

/// Runs the full certifier battery on one generator.
pub fn assumption_suite(
    spec: &GeneratorSpec,
    ensemble: &Arc<PathEnsemble>,
    n_samples: usize,
    seed: u64,
) -> anyhow::Result<Vec<serde_json::Value>> {
    let prep = spec.prepare(ensemble);
    let cert = prep.a_certificate();
    let h1 = check_h1(&prep, n_samples, 1.0, seed);
    let h2 = check_h2(&prep, n_samples, 3.0, 1.0, seed.wrapping_add(1));
    let h3 = check_h3(&prep, &[0.5, 1.0, 2.0, 4.0, 8.0], 256, seed.wrapping_add(2));
    let h4 = check_h4(&prep, n_samples, 1.0, seed.wrapping_add(3));
    let a = check_a(&prep, &cert, n_samples, 3.0, 1.0, seed.wrapping_add(4));
    let h3_ok = h3.iter().all(|r| r.finite);
    Ok(vec![
        serde_json::to_value(&h1)?,
        serde_json::to_value(&h2)?,
        json!({"check": "H3", "passed": h3_ok, "rungs": serde_json::to_value(&h3)?}),
        serde_json::to_value(&h4)?,
        serde_json::to_value(&a)?,
    ])
}

fn run_verify_estimates(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let grid = TimeGrid::uniform(config.grid.horizon, config.grid.n_steps)?;
    let ensemble = simulate_brownian(
        &grid,
        config.ensemble.n_paths,
        config.ensemble.dim,
        config.seed,
    )?;
    clock.mark("simulate");
    let terminal_name = config.terminal.as_deref().unwrap_or("brownian");
    let generator_name = config.generator.as_deref().unwrap_or("zero");
    let k = terminal_k(terminal_name)?;
    let spec = generator_by_name(generator_name, k)?;
    let prep = spec.prepare(&ensemble);
    let xi = build_terminal(&ensemble, terminal_name)?;
    let (pair, _) = solve_with_config(&prep, &xi, config)?;
    clock.mark("solve");

    let n = ensemble.n_steps();
    let probe_nodes: Vec<usize> = (0..5).map(|i| i * n / 5).collect();
    let windows = vec![
        (
            StoppingTimeField::new(&ensemble, vec![n / 5; ensemble.n_paths()])?,
            StoppingTimeField::new(&ensemble, vec![3 * n / 5; ensemble.n_paths()])?,
        ),
        (
            StoppingTimeField::new(&ensemble, vec![n / 10; ensemble.n_paths()])?,
            StoppingTimeField::new(&ensemble, vec![4 * n / 5; ensemble.n_paths()])?,
        ),
    ];
    let cert = prep.a_certificate();
    let report = apriori_check(
        &pair,
        &cert,
        &config.estimator,
        config.solver.c_universal,
        &probe_nodes,
        &windows,
    )?;
    clock.mark("estimates");

    let mut csv = String::from("node,c1,c2,fraction_plain,fraction_weighted\n");
    for p in &report.probes {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.node, p.c1, p.c2, p.fraction_plain, p.fraction_weighted
        ));
    }
    std::fs::write(out_dir.join("estimates.csv"), csv)?;

    let passed =
        pair.report.converged && report.min_fraction() >= 0.99 && report.windows_satisfied();
    Ok((
        passed,
        json!({
            "picard": serde_json::to_value(&pair.report)?,
            "apriori": serde_json::to_value(&report)?,
        }),
    ))
}

fn run_refine_study(
    config: &ExperimentConfig,
    out_dir: &Path,
    clock: &mut PhaseClock,
) -> anyhow::Result<(bool, serde_json::Value)> {
    let ladder = config
        .steps_ladder
        .clone()
        .unwrap_or_else(|| vec![25, 50, 100]);
    let terminal_name = config.terminal.as_deref().unwrap_or("brownian_squared");
    let generator_name = config.generator.as_deref().unwrap_or("zero");
    let base_steps = ladder[0];
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for &steps in &ladder {
        let grid = TimeGrid::uniform(config.grid.horizon, steps)?;
        // couple the path count quadratically to the step count so the
        // statistical error shrinks along with the time-discretization error
        let ratio = steps as f64 / base_steps as f64;
        let n_paths = ((config.ensemble.n_paths as f64) * ratio * ratio).round() as usize;
        let ensemble = simulate_brownian(&grid, n_paths, config.ensemble.dim, config.seed)?;
        let k = terminal_k(terminal_name)?;
        let spec = generator_by_name(generator_name, k)?;
        let prep = spec.prepare(&ensemble);
        let xi = build_terminal(&ensemble, terminal_name)?;
        let (pair, _) = solve_with_config(&prep, &xi, config)?;
        let (y_ref, z_ref) = closed_form(generator_name, terminal_name, &ensemble)
            .ok_or_else(|| anyhow!("refine-study needs an oracle generator/terminal pair"))?;
        let (ey, ez) = relative_errors(&pair, &y_ref, &z_ref);
        rows.push(json!({"n_steps": steps, "n_paths": n_paths, "y_rel_error": ey, "z_rel_error": ez}));
        errors.push(ey);
        clock.mark(&format!("solve n={steps}"));
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    let mut csv = String::from("n_steps,n_paths,y_rel_error,z_rel_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r["n_steps"], r["n_paths"], r["y_rel_error"], r["z_rel_error"]
        ));
    }
    std::fs::write(out_dir.join("refine.csv"), csv)?;
    Ok((
        decreasing,
        json!({"ladder": rows, "strictly_decreasing": decreasing}),
    ))
}

/// Executes the configured experiment, writing artifacts under `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut clock = PhaseClock::new();
    let (passed, reports) = match config.kind {
        ExperimentKind::Solve => run_solve(config, out_dir, &mut clock)?,
        ExperimentKind::SolveRandomTerminal => {
            run_solve_random_terminal(config, out_dir, &mut clock)?
        }
        ExperimentKind::VerifyGronwall => run_verify_gronwall(config, out_dir, &mut clock)?,
        ExperimentKind::VerifyBihari => run_verify_bihari(config, out_dir, &mut clock)?,
        ExperimentKind::VerifyAssumptions => {
            run_verify_assumptions(config, out_dir, &mut clock)?
        }
        ExperimentKind::VerifyEstimates => run_verify_estimates(config, out_dir, &mut clock)?,
        ExperimentKind::RefineStudy => run_refine_study(config, out_dir, &mut clock)?,
    };
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: config.clone(),
        seed: config.seed,
        passed,
        reports,
        phases: clock.phases,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Sorted, stable registry listing.
pub fn list_presets() -> String {
    let mut lines = vec![
        "estimator kinds: nested-mc, regression".to_string(),
        "experiment kinds: refine-study, solve, solve-random-terminal, verify-assumptions, verify-bihari, verify-estimates, verify-gronwall".to_string(),
        "generators: example46:M,delta | linear:a,b | zero".to_string(),
        "rho presets: h:<delta> | identity | linear:<slope>".to_string(),
        "tau presets: exit:<level> | node:<index> | terminal".to_string(),
        "terminal presets: brownian | brownian_squared | constant:<c> | one | sin_cos".to_string(),
    ];
    lines.sort();
    lines.join("\n") + "\n"
}

pub fn example_config() -> &'static str {
    r#"kind = "solve"
seed = 42

[grid]
horizon = 1.0
n_steps = 100

[ensemble]
n_paths = 100000

# generator = "zero"
# terminal = "brownian"
"#
}
