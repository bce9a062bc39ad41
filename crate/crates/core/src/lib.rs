//! Monte Carlo machinery for backward stochastic differential equations
//! with stochastic, pathwise monotonicity and Lipschitz weights: Brownian
//! ensembles, conditional-expectation estimators, a Picard solver on a
//! budget-driven block partition, and empirical certifiers for the
//! comparison inequalities the convergence analysis rests on.

pub mod conditional;
pub mod error;
pub mod generators;
pub mod inequalities;
pub mod io;
pub mod paths;
pub mod sfuncs;
pub mod solver;

pub use error::{Error, Result};
pub use paths::{
    hitting_time, norms, simulate_brownian, AdaptedProcess, NormReport, PathEnsemble,
    StoppingTimeField, TimeGrid,
};
pub use conditional::CondExpEstimator;
pub use generators::{GeneratorSpec, PreparedGenerator};
pub use sfuncs::{make_h, rho_by_name, validate_class_s, ClassSReport, RhoFunction, ThetaCalculus};
pub use solver::{Partition, PicardReport, SolutionPair, SolverConfig, TerminalCondition};
