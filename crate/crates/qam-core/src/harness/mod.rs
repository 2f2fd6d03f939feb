//! Configuration, offline and offline-to-online training loops, the
//! deterministic evaluation protocol, and metrics logging.

pub mod eval;
pub mod train;

pub use eval::{evaluate, EvalResult};
pub use train::{run_offline, run_online, RunArtifacts};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, AgentKind};
use crate::critic::StdMode;
use crate::env::{env_spec_from_name, EnvSpec};
use crate::error::{QamError, Result};

/// One training run, fully specified. JSON on disk; CLI flags override
/// individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub agent: String,
    pub env: String,
    /// Explicit environment parameters; when absent, `env` is resolved to
    /// its standard configuration.
    pub env_spec: Option<EnvSpec>,
    pub tau: f64,
    pub rho: f64,
    pub gamma: f64,
    pub ema_rate: f64,
    pub critic_k: usize,
    pub flow_steps: usize,
    pub width: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub clip_boundary: bool,
    pub std_mode: StdMode,
    pub alpha: f64,
    pub sigma_a: f64,
    pub vartheta: f64,
    pub alpha_bc: f64,
    pub eta_init: f64,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub online_buffer_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            agent: "qam".into(),
            env: "gauss-bandit".into(),
            env_spec: None,
            tau: 1.0,
            rho: 0.5,
            gamma: 0.99,
            ema_rate: 5e-3,
            critic_k: 10,
            flow_steps: 10,
            width: 64,
            depth: 2,
            batch_size: 256,
            lr: 3e-4,
            max_grad_norm: Some(1.0),
            clip_boundary: true,
            std_mode: StdMode::RootSumSquares,
            alpha: 10.0,
            sigma_a: 0.3,
            vartheta: 0.1,
            alpha_bc: 1.0,
            eta_init: 0.1,
            offline_steps: 20_000,
            online_steps: 10_000,
            online_buffer_capacity: 100_000,
            eval_interval: 1_000,
            eval_episodes: 20,
            seed: 0,
            dataset: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let cfg: RunConfig = serde_json::from_reader(file)?;
        Ok(cfg)
    }

    pub fn agent_kind(&self) -> Result<AgentKind> {
        AgentKind::parse(&self.agent)
    }

    pub fn resolved_env(&self) -> Result<EnvSpec> {
        match &self.env_spec {
            Some(spec) => Ok(spec.clone()),
            None => env_spec_from_name(&self.env),
        }
    }

    /// Field validation plus referenced-file existence.
    pub fn validate(&self) -> Result<()> {
        self.agent_kind()?;
        self.resolved_env()?;
        if self.tau < 0.0 {
            return Err(QamError::config("tau must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(QamError::config("gamma must lie in (0, 1)"));
        }
        if self.flow_steps < 2 {
            return Err(QamError::config("flow_steps must be >= 2"));
        }
        if self.critic_k < 1 {
            return Err(QamError::config("critic_k must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(QamError::config("batch_size must be >= 1"));
        }
        if let Some(path) = &self.dataset {
            if !path.exists() {
                return Err(QamError::config(format!(
                    "dataset file does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn agent_config(&self, state_dim: usize, action_dim: usize) -> AgentConfig {
        AgentConfig {
            state_dim,
            action_dim,
            width: self.width,
            depth: self.depth,
            tau: self.tau,
            gamma: self.gamma,
            rho: self.rho,
            ema_rate: self.ema_rate,
            critic_k: self.critic_k,
            flow_steps: self.flow_steps,
            lr: self.lr,
            max_grad_norm: self.max_grad_norm,
            clip_boundary: self.clip_boundary,
            std_mode: self.std_mode,
            alpha: self.alpha,
            sigma_a: self.sigma_a,
            vartheta: self.vartheta,
            alpha_bc: self.alpha_bc,
            eta_init: self.eta_init,
            seed: self.seed,
        }
    }
}
