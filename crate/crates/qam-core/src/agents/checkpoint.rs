//! Agent checkpoints: a directory with one JSON training-state manifest and
//! one parameter container per component net, optimizer moments referenced by
//! file name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentConfig, AgentKind, PolicyNets};
use crate::error::{QamError, Result};
use crate::nn::checkpoint::{load_adam, load_params, save_adam, save_params};
use crate::nn::{AdamState, ParameterSet};

#[derive(Debug, Serialize, Deserialize)]
struct AgentManifest {
    version: u32,
    agent: AgentKind,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_eta: Option<f64>,
    dropped_trajectories: u64,
    skipped_updates: u64,
    config: AgentConfig,
    /// Component name -> parameter file.
    components: BTreeMap<String, String>,
    /// Component name -> Adam moment file.
    optimizers: BTreeMap<String, String>,
}

fn put(
    dir: &Path,
    components: &mut BTreeMap<String, String>,
    optimizers: &mut BTreeMap<String, String>,
    name: &str,
    params: &ParameterSet,
    opt: Option<&AdamState>,
) -> Result<()> {
    let pfile = format!("{name}.params");
    save_params(&dir.join(&pfile), params)?;
    components.insert(name.to_string(), pfile);
    if let Some(o) = opt {
        let ofile = format!("{name}.adam");
        save_adam(&dir.join(&ofile), o, params)?;
        optimizers.insert(name.to_string(), ofile);
    }
    Ok(())
}

pub fn save_agent(dir: &Path, agent: &Agent) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut components = BTreeMap::new();
    let mut optimizers = BTreeMap::new();

    for (j, (member, opt)) in agent
        .critic
        .members
        .iter()
        .zip(agent.critic_opts.iter())
        .enumerate()
    {
        put(dir, &mut components, &mut optimizers, &format!("critic_{j}"), member, Some(opt))?;
        put(
            dir,
            &mut components,
            &mut optimizers,
            &format!("critic_target_{j}"),
            &agent.critic.targets[j].target,
            None,
        )?;
    }

    let mut log_eta = None;
    match &agent.policy {
        PolicyNets::AdjointFlow { beta, theta, opt_beta, opt_theta, .. } => {
            put(dir, &mut components, &mut optimizers, "f_beta", &beta.params, Some(opt_beta))?;
            put(dir, &mut components, &mut optimizers, "f_theta", &theta.params, Some(opt_theta))?;
        }
        PolicyNets::OneStep { beta, theta, opt_beta, opt_theta, mu, opt_mu } => {
            put(dir, &mut components, &mut optimizers, "f_beta", &beta.params, Some(opt_beta))?;
            put(dir, &mut components, &mut optimizers, "f_theta", &theta.params, Some(opt_theta))?;
            put(dir, &mut components, &mut optimizers, "one_step", mu, Some(opt_mu))?;
        }
        PolicyNets::Edit { beta, theta, opt_beta, opt_theta, edit, opt_edit, log_eta: le, .. } => {
            put(dir, &mut components, &mut optimizers, "f_beta", &beta.params, Some(opt_beta))?;
            put(dir, &mut components, &mut optimizers, "f_theta", &theta.params, Some(opt_theta))?;
            put(dir, &mut components, &mut optimizers, "edit", edit, Some(opt_edit))?;
            log_eta = Some(*le);
        }
        PolicyNets::Fawac { flow, opt_flow, value, opt_value } => {
            put(dir, &mut components, &mut optimizers, "flow", &flow.params, Some(opt_flow))?;
            put(dir, &mut components, &mut optimizers, "value", value, Some(opt_value))?;
        }
        PolicyNets::Fbrac { flow, opt_flow } => {
            put(dir, &mut components, &mut optimizers, "flow", &flow.params, Some(opt_flow))?;
        }
        PolicyNets::Cgql { beta, opt_beta } => {
            put(dir, &mut components, &mut optimizers, "f_beta", &beta.params, Some(opt_beta))?;
        }
    }

    let manifest = AgentManifest {
        version: 1,
        agent: agent.kind,
        step: agent.step,
        log_eta,
        dropped_trajectories: agent.dropped_trajectories,
        skipped_updates: agent.skipped_updates,
        config: agent.cfg.clone(),
        components,
        optimizers,
    };
    let file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

pub fn load_agent(dir: &Path) -> Result<Agent> {
    let manifest: AgentManifest =
        serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
    let mut agent = Agent::new(manifest.agent, manifest.config.clone())?;
    agent.step = manifest.step;
    agent.dropped_trajectories = manifest.dropped_trajectories;
    agent.skipped_updates = manifest.skipped_updates;

    let get = |name: &str| -> Result<ParameterSet> {
        let file = manifest
            .components
            .get(name)
            .ok_or_else(|| QamError::Format(format!("checkpoint misses component '{name}'")))?;
        load_params(&dir.join(file))
    };
    let get_opt = |name: &str, like: &ParameterSet| -> Result<AdamState> {
        match manifest.optimizers.get(name) {
            Some(file) => load_adam(&dir.join(file), like),
            None => Ok(AdamState::new(like, manifest.config.lr)),
        }
    };

    for j in 0..agent.critic.k() {
        agent.critic.members[j] = get(&format!("critic_{j}"))?;
        agent.critic.targets[j].target = get(&format!("critic_target_{j}"))?;
        agent.critic_opts[j] = get_opt(&format!("critic_{j}"), &agent.critic.members[j])?;
    }

    match &mut agent.policy {
        PolicyNets::AdjointFlow { beta, theta, opt_beta, opt_theta, .. } => {
            beta.params = get("f_beta")?;
            theta.params = get("f_theta")?;
            *opt_beta = get_opt("f_beta", &beta.params)?;
            *opt_theta = get_opt("f_theta", &theta.params)?;
        }
        PolicyNets::OneStep { beta, theta, opt_beta, opt_theta, mu, opt_mu } => {
            beta.params = get("f_beta")?;
            theta.params = get("f_theta")?;
            *mu = get("one_step")?;
            *opt_beta = get_opt("f_beta", &beta.params)?;
            *opt_theta = get_opt("f_theta", &theta.params)?;
            *opt_mu = get_opt("one_step", mu)?;
        }
        PolicyNets::Edit { beta, theta, opt_beta, opt_theta, edit, opt_edit, log_eta, .. } => {
            beta.params = get("f_beta")?;
            theta.params = get("f_theta")?;
            *edit = get("edit")?;
            *opt_beta = get_opt("f_beta", &beta.params)?;
            *opt_theta = get_opt("f_theta", &theta.params)?;
            *opt_edit = get_opt("edit", edit)?;
            if let Some(le) = manifest.log_eta {
                *log_eta = le;
            }
        }
        PolicyNets::Fawac { flow, opt_flow, value, opt_value } => {
            flow.params = get("flow")?;
            *value = get("value")?;
            *opt_flow = get_opt("flow", &flow.params)?;
            *opt_value = get_opt("value", value)?;
        }
        PolicyNets::Fbrac { flow, opt_flow } => {
            flow.params = get("flow")?;
            *opt_flow = get_opt("flow", &flow.params)?;
        }
        PolicyNets::Cgql { beta, opt_beta } => {
            beta.params = get("f_beta")?;
            *opt_beta = get_opt("f_beta", &beta.params)?;
        }
    }
    Ok(agent)
}
