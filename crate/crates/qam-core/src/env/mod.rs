//! Toy environments with analytic or dynamic-programming oracles, offline
//! dataset generation, and replay buffers.

pub mod bandit;
pub mod data;
pub mod maze;
pub mod oracle;

pub use bandit::{BimodalBandit, GaussTiltBandit};
pub use data::{gen_dataset, Batch, BehaviorSpec, Dataset, SamplePool, Transition};
pub use maze::{scripted_action, PointMaze, RouteSide, Wall};
pub use oracle::{dp_policy_value, quadrature_tilted_moments, tilted_gaussian_oracle};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{QamError, Result};
use crate::nn::SeededRng;

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepOut {
    pub next: Array1<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A toy environment. Transitions are deterministic given (state, action);
/// stochasticity lives only in behavior policies and initial states, which
/// keeps the DP oracles exact.
pub trait Env {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Whether actions are constrained to [-1, 1]^A. Bandits evaluate a
    /// polynomial reward on all of R^A and are unbounded by design.
    fn bounded_actions(&self) -> bool;
    fn reset(&mut self, rng: &mut SeededRng) -> Array1<f64>;
    fn step(&mut self, action: &Array1<f64>) -> StepOut;
    /// Count of out-of-box actions that had to be clipped.
    fn clip_warnings(&self) -> u64;
}

/// Declarative environment construction (config files, CLI).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    GaussBandit {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        mu: Vec<f64>,
        /// Diagonal variances of the behavior Gaussian.
        #[serde(default)]
        var: Vec<f64>,
        #[serde(default)]
        b: Vec<f64>,
        #[serde(default)]
        c: Vec<f64>,
    },
    BimodalBandit {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    PointMaze,
}

fn default_dim() -> usize {
    2
}

pub fn make_env(spec: &EnvSpec) -> Result<Box<dyn Env>> {
    match spec {
        EnvSpec::GaussBandit { dim, mu, var, b, c } => {
            let d = *dim;
            let fill = |v: &Vec<f64>, def: f64| -> Result<Array1<f64>> {
                if v.is_empty() {
                    Ok(Array1::from_elem(d, def))
                } else if v.len() == d {
                    Ok(Array1::from_vec(v.clone()))
                } else {
                    Err(QamError::config(format!(
                        "bandit parameter length {} does not match dim {d}",
                        v.len()
                    )))
                }
            };
            Ok(Box::new(GaussTiltBandit::new(
                fill(mu, 0.0)?,
                fill(var, 1.0)?,
                fill(b, 0.0)?,
                fill(c, 0.0)?,
            )?))
        }
        EnvSpec::BimodalBandit { dim } => Ok(Box::new(BimodalBandit::standard(*dim))),
        EnvSpec::PointMaze => Ok(Box::new(PointMaze::standard())),
    }
}

pub fn env_spec_from_name(name: &str) -> Result<EnvSpec> {
    match name {
        "gauss-bandit" => Ok(EnvSpec::GaussBandit {
            dim: 2,
            mu: vec![],
            var: vec![],
            b: vec![1.0, 0.0],
            c: vec![],
        }),
        "bimodal-bandit" => Ok(EnvSpec::BimodalBandit { dim: 2 }),
        "point-maze" => Ok(EnvSpec::PointMaze),
        other => Err(QamError::config(format!("unknown environment '{other}'"))),
    }
}
