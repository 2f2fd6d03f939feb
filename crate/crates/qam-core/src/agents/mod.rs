//! Full learning procedures: the adjoint-matched flow agent and its one-step
//! and edit-policy variants, plus the weighted-cloning, BPTT, and
//! classifier-guidance baselines.

pub mod baselines;
pub mod checkpoint;
pub mod edit;
pub mod updates;

pub use baselines::cgql_velocity;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::critic::{CriticEnsemble, StdMode};
use crate::env::Batch;
use crate::error::{QamError, Result};
use crate::flow::{ode_sample, FieldRole, TimeGrid, VelocityField};
use crate::nn::{AdamState, ParameterSet, ScalarAdam, SeededRng};

/// Which learning procedure an [`Agent`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Qam,
    Bam,
    QamFql,
    QamEdit,
    Fawac,
    Fbrac,
    Cgql,
}

impl AgentKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "qam" => Ok(AgentKind::Qam),
            "bam" => Ok(AgentKind::Bam),
            "qam-fql" => Ok(AgentKind::QamFql),
            "qam-edit" => Ok(AgentKind::QamEdit),
            "fawac" => Ok(AgentKind::Fawac),
            "fbrac" => Ok(AgentKind::Fbrac),
            "cgql" => Ok(AgentKind::Cgql),
            other => Err(QamError::config(format!("unknown agent kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::Qam => "qam",
            AgentKind::Bam => "bam",
            AgentKind::QamFql => "qam-fql",
            AgentKind::QamEdit => "qam-edit",
            AgentKind::Fawac => "fawac",
            AgentKind::Fbrac => "fbrac",
            AgentKind::Cgql => "cgql",
        }
    }

    /// Optimizer global-norm clipping is active for the adjoint-matched
    /// family only; the other baselines run unclipped.
    pub fn uses_grad_clip(&self) -> bool {
        matches!(
            self,
            AgentKind::Qam | AgentKind::Bam | AgentKind::QamFql | AgentKind::QamEdit
        )
    }
}

/// Hyperparameters shared by every agent kind. Defaults follow the common
/// table (lr 3e-4, K = 10, rho = 0.5, lambda = 5e-3, T = 10, clip 1) at
/// desk-scale network sizes (width 64, two hidden layers).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_ema")]
    pub ema_rate: f64,
    #[serde(default = "default_k")]
    pub critic_k: usize,
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub max_grad_norm: Option<f64>,
    #[serde(default = "default_true")]
    pub clip_boundary: bool,
    #[serde(default = "default_std_mode")]
    pub std_mode: StdMode,
    /// Distillation coefficient (one-step variant).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Edit box radius (edit variant).
    #[serde(default = "default_sigma_a")]
    pub sigma_a: f64,
    /// Guidance strength (classifier-guidance baseline).
    #[serde(default = "default_vartheta")]
    pub vartheta: f64,
    /// Behavior-cloning coefficient (BPTT baseline).
    #[serde(default = "default_alpha_bc")]
    pub alpha_bc: f64,
    #[serde(default = "default_eta")]
    pub eta_init: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> usize {
    64
}
fn default_depth() -> usize {
    2
}
fn default_tau() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.99
}
fn default_rho() -> f64 {
    0.5
}
fn default_ema() -> f64 {
    5e-3
}
fn default_k() -> usize {
    10
}
fn default_flow_steps() -> usize {
    10
}
fn default_lr() -> f64 {
    3e-4
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_true() -> bool {
    true
}
fn default_std_mode() -> StdMode {
    StdMode::RootSumSquares
}
fn default_alpha() -> f64 {
    10.0
}
fn default_sigma_a() -> f64 {
    0.3
}
fn default_vartheta() -> f64 {
    0.1
}
fn default_alpha_bc() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.1
}

impl AgentConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        AgentConfig {
            state_dim,
            action_dim,
            width: default_width(),
            depth: default_depth(),
            tau: default_tau(),
            gamma: default_gamma(),
            rho: default_rho(),
            ema_rate: default_ema(),
            critic_k: default_k(),
            flow_steps: default_flow_steps(),
            lr: default_lr(),
            max_grad_norm: default_clip(),
            clip_boundary: default_true(),
            std_mode: default_std_mode(),
            alpha: default_alpha(),
            sigma_a: default_sigma_a(),
            vartheta: default_vartheta(),
            alpha_bc: default_alpha_bc(),
            eta_init: default_eta(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
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
        if self.sigma_a < 0.0 {
            return Err(QamError::config("sigma_a must be >= 0"));
        }
        Ok(())
    }

    fn effective_clip(&self, kind: AgentKind) -> Option<f64> {
        if kind.uses_grad_clip() {
            self.max_grad_norm
        } else {
            None
        }
    }
}

/// Scalar diagnostics from one update, in a fixed per-kind column order.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub fields: Vec<(&'static str, f64)>,
}

impl Metrics {
    pub fn push(&mut self, name: &'static str, value: f64) {
        self.fields.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields.iter().find(|(k, _)| *k == name).map(|(_, v)| *v)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.fields.iter().map(|(k, _)| *k).collect()
    }
}

/// Fixed per-kind metric column set (the CSV schema contract).
pub fn metric_columns(kind: AgentKind) -> &'static [&'static str] {
    const CORE: &[&str] = &[
        "td_loss",
        "policy_loss",
        "fm_loss",
        "critic_grad_norm",
        "policy_grad_norm",
        "dropped",
        "skipped",
    ];
    const FQL: &[&str] = &[
        "td_loss",
        "policy_loss",
        "fm_loss",
        "critic_grad_norm",
        "policy_grad_norm",
        "dropped",
        "skipped",
        "actor_loss",
    ];
    const EDIT: &[&str] = &[
        "td_loss",
        "policy_loss",
        "fm_loss",
        "critic_grad_norm",
        "policy_grad_norm",
        "dropped",
        "skipped",
        "actor_loss",
        "actor_grad_norm",
        "eta",
        "entropy_est",
    ];
    const FAWAC: &[&str] = &[
        "td_loss",
        "value_loss",
        "fm_loss",
        "mean_weight",
        "critic_grad_norm",
        "dropped",
        "skipped",
    ];
    const FBRAC: &[&str] = &[
        "td_loss",
        "policy_loss",
        "fm_loss",
        "bptt_term",
        "critic_grad_norm",
        "policy_grad_norm",
        "dropped",
        "skipped",
    ];
    const CGQL: &[&str] = &["td_loss", "fm_loss", "critic_grad_norm", "dropped", "skipped"];
    match kind {
        AgentKind::Qam | AgentKind::Bam => CORE,
        AgentKind::QamFql => FQL,
        AgentKind::QamEdit => EDIT,
        AgentKind::Fawac => FAWAC,
        AgentKind::Fbrac => FBRAC,
        AgentKind::Cgql => CGQL,
    }
}

/// Networks and optimizers specific to each agent kind.
pub enum PolicyNets {
    /// Plain adjoint matching (lean) or its basic-adjoint ablation.
    AdjointFlow {
        beta: VelocityField,
        theta: VelocityField,
        opt_beta: AdamState,
        opt_theta: AdamState,
        basic: bool,
    },
    /// Adjoint matching plus a one-step distilled noise-conditioned policy.
    OneStep {
        beta: VelocityField,
        theta: VelocityField,
        opt_beta: AdamState,
        opt_theta: AdamState,
        mu: ParameterSet,
        opt_mu: AdamState,
    },
    /// Adjoint matching plus a bounded tanh-Gaussian edit head with learned
    /// entropy temperature (stored as log eta).
    Edit {
        beta: VelocityField,
        theta: VelocityField,
        opt_beta: AdamState,
        opt_theta: AdamState,
        edit: ParameterSet,
        opt_edit: AdamState,
        log_eta: f64,
        opt_eta: ScalarAdam,
    },
    /// Advantage-weighted flow cloning with a state-value baseline.
    Fawac {
        flow: VelocityField,
        opt_flow: AdamState,
        value: ParameterSet,
        opt_value: AdamState,
    },
    /// Flow policy trained by cloning plus backprop through the sampler.
    Fbrac { flow: VelocityField, opt_flow: AdamState },
    /// Behavior cloning with critic-gradient guidance at sampling time.
    Cgql { beta: VelocityField, opt_beta: AdamState },
}

pub(crate) struct AgentRngs {
    pub td: SeededRng,
    pub traj: SeededRng,
    pub fm: SeededRng,
    pub actor: SeededRng,
}

/// One agent: critic ensemble, policy networks, named RNG streams, counters.
pub struct Agent {
    pub kind: AgentKind,
    pub cfg: AgentConfig,
    pub critic: CriticEnsemble,
    pub(crate) critic_opts: Vec<AdamState>,
    pub policy: PolicyNets,
    pub(crate) rngs: AgentRngs,
    pub step: u64,
    pub dropped_trajectories: u64,
    pub skipped_updates: u64,
}

impl Agent {
    pub fn new(kind: AgentKind, cfg: AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = SeededRng::named(cfg.seed, "agent/init");
        let mut critic = CriticEnsemble::new(
            cfg.state_dim,
            cfg.action_dim,
            cfg.width,
            cfg.depth,
            cfg.critic_k,
            cfg.rho,
            cfg.ema_rate,
            &mut init_rng,
        )?;
        critic.std_mode = cfg.std_mode;
        let critic_opts = critic.members.iter().map(|m| AdamState::new(m, cfg.lr)).collect();

        let mk_field = |role, rng: &mut SeededRng| {
            VelocityField::new(cfg.state_dim, cfg.action_dim, cfg.width, cfg.depth, role, rng)
        };

        let policy = match kind {
            AgentKind::Qam | AgentKind::Bam => {
                let beta = mk_field(FieldRole::BehaviorBeta, &mut init_rng);
                let theta = mk_field(FieldRole::FinetunedTheta, &mut init_rng);
                PolicyNets::AdjointFlow {
                    opt_beta: AdamState::new(&beta.params, cfg.lr),
                    opt_theta: AdamState::new(&theta.params, cfg.lr),
                    beta,
                    theta,
                    basic: kind == AgentKind::Bam,
                }
            }
            AgentKind::QamFql => {
                let beta = mk_field(FieldRole::BehaviorBeta, &mut init_rng);
                let theta = mk_field(FieldRole::FinetunedTheta, &mut init_rng);
                let mu = ParameterSet::mlp(
                    cfg.state_dim + cfg.action_dim,
                    cfg.width,
                    cfg.depth,
                    cfg.action_dim,
                    crate::nn::Activation::Gelu,
                    &mut init_rng,
                );
                PolicyNets::OneStep {
                    opt_beta: AdamState::new(&beta.params, cfg.lr),
                    opt_theta: AdamState::new(&theta.params, cfg.lr),
                    opt_mu: AdamState::new(&mu, cfg.lr),
                    beta,
                    theta,
                    mu,
                }
            }
            AgentKind::QamEdit => {
                let beta = mk_field(FieldRole::BehaviorBeta, &mut init_rng);
                let theta = mk_field(FieldRole::FinetunedTheta, &mut init_rng);
                let edit = ParameterSet::mlp(
                    cfg.state_dim + cfg.action_dim,
                    cfg.width,
                    cfg.depth,
                    2 * cfg.action_dim,
                    crate::nn::Activation::Gelu,
                    &mut init_rng,
                );
                PolicyNets::Edit {
                    opt_beta: AdamState::new(&beta.params, cfg.lr),
                    opt_theta: AdamState::new(&theta.params, cfg.lr),
                    opt_edit: AdamState::new(&edit, cfg.lr),
                    beta,
                    theta,
                    edit,
                    log_eta: cfg.eta_init.max(1e-12).ln(),
                    opt_eta: ScalarAdam::new(cfg.lr),
                }
            }
            AgentKind::Fawac => {
                let flow = mk_field(FieldRole::FinetunedTheta, &mut init_rng);
                let value = ParameterSet::mlp(
                    cfg.state_dim,
                    cfg.width,
                    cfg.depth,
                    1,
                    crate::nn::Activation::Gelu,
                    &mut init_rng,
                );
                PolicyNets::Fawac {
                    opt_flow: AdamState::new(&flow.params, cfg.lr),
                    opt_value: AdamState::new(&value, cfg.lr),
                    flow,
                    value,
                }
            }
            AgentKind::Fbrac => {
                let flow = mk_field(FieldRole::FinetunedTheta, &mut init_rng);
                PolicyNets::Fbrac {
                    opt_flow: AdamState::new(&flow.params, cfg.lr),
                    flow,
                }
            }
            AgentKind::Cgql => {
                let beta = mk_field(FieldRole::BehaviorBeta, &mut init_rng);
                PolicyNets::Cgql {
                    opt_beta: AdamState::new(&beta.params, cfg.lr),
                    beta,
                }
            }
        };

        let rngs = AgentRngs {
            td: SeededRng::named(cfg.seed, "agent/td"),
            traj: SeededRng::named(cfg.seed, "agent/traj"),
            fm: SeededRng::named(cfg.seed, "agent/fm"),
            actor: SeededRng::named(cfg.seed, "agent/actor"),
        };

        Ok(Agent {
            kind,
            cfg,
            critic,
            critic_opts,
            policy,
            rngs,
            step: 0,
            dropped_trajectories: 0,
            skipped_updates: 0,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.cfg.flow_steps).expect("validated at construction")
    }

    /// Per-member critic optimizers (learning-rate schedules, tests).
    pub fn critic_opts_mut(&mut self) -> &mut [AdamState] {
        &mut self.critic_opts
    }

    /// One gradient step per component from one uniformly drawn batch.
    pub fn update(&mut self, batch: &Batch) -> Result<Metrics> {
        let m = match self.kind {
            AgentKind::Qam | AgentKind::Bam => updates::adjoint_flow_update(self, batch)?,
            AgentKind::QamFql => updates::one_step_update(self, batch)?,
            AgentKind::QamEdit => updates::edit_update(self, batch)?,
            AgentKind::Fawac => baselines::fawac_update(self, batch)?,
            AgentKind::Fbrac => baselines::fbrac_update(self, batch)?,
            AgentKind::Cgql => baselines::cgql_update(self, batch)?,
        };
        self.step += 1;
        Ok(m)
    }

    /// The flow field that drives acting and value backups for this kind.
    pub fn acting_field(&self) -> &VelocityField {
        match &self.policy {
            PolicyNets::AdjointFlow { theta, .. }
            | PolicyNets::OneStep { theta, .. }
            | PolicyNets::Edit { theta, .. } => theta,
            PolicyNets::Fawac { flow, .. } | PolicyNets::Fbrac { flow, .. } => flow,
            PolicyNets::Cgql { beta, .. } => beta,
        }
    }

    pub fn behavior_field(&self) -> Option<&VelocityField> {
        match &self.policy {
            PolicyNets::AdjointFlow { beta, .. }
            | PolicyNets::OneStep { beta, .. }
            | PolicyNets::Edit { beta, .. }
            | PolicyNets::Cgql { beta, .. } => Some(beta),
            PolicyNets::Fawac { .. } | PolicyNets::Fbrac { .. } => None,
        }
    }

    /// Action for one state; always inside [-1, 1]^A. Deterministic acting
    /// uses z = 0 through the ODE sampler and the edit-policy mean.
    pub fn act(&self, s: &Array1<f64>, rng: &mut SeededRng, deterministic: bool) -> Result<Array1<f64>> {
        let s_row = s.clone().insert_axis(ndarray::Axis(0));
        let dim = self.cfg.action_dim;
        let z = if deterministic {
            Array2::zeros((1, dim))
        } else {
            rng.normal_mat(1, dim)
        };
        let t_steps = self.cfg.flow_steps;
        let a = match &self.policy {
            PolicyNets::AdjointFlow { theta, .. } => ode_sample(theta, &s_row, &z, t_steps)?,
            PolicyNets::Fawac { flow, .. } | PolicyNets::Fbrac { flow, .. } => {
                ode_sample(flow, &s_row, &z, t_steps)?
            }
            PolicyNets::OneStep { mu, .. } => {
                let x = crate::critic::CriticEnsemble::stack(&s_row, &z);
                mu.forward_batch(&x).mapv(|v| v.clamp(-1.0, 1.0))
            }
            PolicyNets::Edit { theta, edit, .. } => {
                let base = ode_sample(theta, &s_row, &z, t_steps)?;
                if self.cfg.sigma_a == 0.0 {
                    base
                } else {
                    let eps = if deterministic {
                        Array2::zeros((1, dim))
                    } else {
                        rng.normal_mat(1, dim)
                    };
                    let (delta, _) = edit::edit_sample(edit, &s_row, &base, &eps, self.cfg.sigma_a);
                    (&base + &delta).mapv(|v| v.clamp(-1.0, 1.0))
                }
            }
            PolicyNets::Cgql { beta, .. } => baselines::guided_ode(
                beta,
                &self.critic,
                &s_row,
                &z,
                t_steps,
                self.cfg.vartheta,
                self.cfg.tau,
            )?,
        };
        Ok(a.row(0).to_owned())
    }

    /// Unclipped terminal SDE samples from the acting flow (moment
    /// measurements against the tilted-Gaussian oracle).
    pub fn sample_policy_terminals(&self, s: &Array2<f64>, rng: &mut SeededRng) -> Array2<f64> {
        let traj = crate::flow::sde_sample(self.acting_field(), s, self.grid(), rng);
        traj.terminal().clone()
    }
}
