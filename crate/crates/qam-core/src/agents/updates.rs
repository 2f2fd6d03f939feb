//! Update procedures for the adjoint-matched family: shared critic/actor
//! plumbing, the core flow update, and the one-step and edit variants.

use ndarray::Array2;

use crate::adjoint::{am_loss, bam_loss, basic_adjoint, boundary_adjoint, lean_adjoint};
use crate::agents::{edit, Agent, Metrics, PolicyNets};
use crate::critic::CriticEnsemble;
use crate::env::Batch;
use crate::error::{QamError, Result};
use crate::flow::{fm_loss, ode_sample, sde_sample, TimeGrid, VelocityField};
use crate::nn::{AdamState, Tape};

/// TD step against the pessimistic target for precomputed backup actions.
/// Returns (loss, mean member gradient norm).
pub(crate) fn critic_step(
    critic: &mut CriticEnsemble,
    opts: &mut [AdamState],
    batch: &Batch,
    a_next: &Array2<f64>,
    gamma: f64,
    clip: Option<f64>,
) -> Result<(f64, f64)> {
    let y = critic.pessimistic_target(&batch.s_next, a_next, &batch.r, &batch.done, gamma);
    let (loss, grads) = critic.td_loss(&batch.s, &batch.a, &y)?;
    let mut norm = 0.0;
    for ((member, opt), g) in critic.members.iter_mut().zip(opts.iter_mut()).zip(grads.iter()) {
        let rep = opt.apply(member, g, clip);
        norm += rep.grad_norm;
    }
    Ok((loss, norm / critic.k() as f64))
}

/// One-step actor loss on the tape:
/// `mean(-Qbar(s, mu(s, z)) + alpha ||mu(s, z) - target||^2)` with the critic
/// frozen and the ODE target constant; shared z between both terms.
pub(crate) fn one_step_actor_step(
    mu: &mut crate::nn::ParameterSet,
    opt: &mut AdamState,
    critic: &CriticEnsemble,
    s: &Array2<f64>,
    z: &Array2<f64>,
    target: &Array2<f64>,
    alpha: f64,
    clip: Option<f64>,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let s_node = tape.constant(s.clone());
    let z_node = tape.constant(z.clone());
    let x = tape.concat(&[s_node, z_node]);
    let handle = tape.register(mu, true);
    let out = tape.mlp(&handle, x);

    let sa = tape.concat(&[s_node, out]);
    let mut q_sum = None;
    for member in &critic.members {
        let ch = tape.register(member, false);
        let q = tape.mlp(&ch, sa);
        q_sum = Some(match q_sum {
            None => q,
            Some(acc) => tape.add(acc, q),
        });
    }
    let q_mean = tape.scale(q_sum.expect("K >= 1"), 1.0 / critic.k() as f64);

    let tgt = tape.constant(target.clone());
    let diff = tape.sub(out, tgt);
    let sq = tape.square(diff);
    let dist = tape.sum_rows(sq);
    let neg_q = tape.scale(q_mean, -1.0);
    let weighted = tape.scale(dist, alpha);
    let per_row = tape.add(neg_q, weighted);
    let loss = tape.mean_all(per_row);

    let value = tape.scalar(loss);
    let grads = tape.backward_scalar(loss)?;
    let pg = grads.of_mlp(&handle, mu);
    let rep = opt.apply(mu, &pg, clip);
    Ok((value, rep.grad_norm))
}

struct FlowCoreOut {
    td_loss: f64,
    critic_grad_norm: f64,
    policy_loss: f64,
    policy_grad_norm: f64,
    fm_loss: f64,
    dropped: usize,
    skipped: bool,
}

/// Steps 1-5 of the core procedure: critic TD against `a_next`, SDE
/// trajectories, boundary + adjoint sweep, one matched step on theta, one
/// cloning step on beta, then the EMA target update.
#[allow(clippy::too_many_arguments)]
fn flow_core(
    agent_kind_basic: bool,
    cfg: &crate::agents::AgentConfig,
    clip: Option<f64>,
    critic: &mut CriticEnsemble,
    critic_opts: &mut [AdamState],
    rngs: &mut crate::agents::AgentRngs,
    beta: &mut VelocityField,
    theta: &mut VelocityField,
    opt_beta: &mut AdamState,
    opt_theta: &mut AdamState,
    batch: &Batch,
    a_next: &Array2<f64>,
) -> Result<FlowCoreOut> {
    let grid = TimeGrid::new(cfg.flow_steps)?;

    let (td_loss, critic_grad_norm) =
        critic_step(critic, critic_opts, batch, a_next, cfg.gamma, clip)?;

    let traj = sde_sample(&*theta, &batch.s, grid, &mut rngs.traj);
    let g1 = boundary_adjoint(critic, &batch.s, traj.terminal(), cfg.tau, cfg.clip_boundary);
    let adj = if agent_kind_basic {
        basic_adjoint(&*theta, &*beta, &traj, &g1)?
    } else {
        lean_adjoint(&*beta, &traj, &g1)?
    };
    let dropped = adj.invalid_count();

    let mut skipped = false;
    let (policy_loss, policy_grad_norm) = if dropped == batch.len() {
        skipped = true;
        (f64::NAN, 0.0)
    } else {
        let (loss, grads) = if agent_kind_basic {
            bam_loss(theta, &*beta, &traj, &adj)?
        } else {
            am_loss(theta, &*beta, &traj, &adj)?
        };
        let rep = opt_theta.apply(&mut theta.params, &grads, clip);
        if !rep.applied {
            skipped = true;
        }
        (loss, rep.grad_norm)
    };

    let (fm, fm_grads) = fm_loss(beta, &batch.s, &batch.a, None, &mut rngs.fm)?;
    opt_beta.apply(&mut beta.params, &fm_grads, None);

    critic.update_targets();

    Ok(FlowCoreOut {
        td_loss,
        critic_grad_norm,
        policy_loss,
        policy_grad_norm,
        fm_loss: fm,
        dropped,
        skipped,
    })
}

fn push_core(m: &mut Metrics, out: &FlowCoreOut) {
    m.push("td_loss", out.td_loss);
    m.push("policy_loss", out.policy_loss);
    m.push("fm_loss", out.fm_loss);
    m.push("critic_grad_norm", out.critic_grad_norm);
    m.push("policy_grad_norm", out.policy_grad_norm);
    m.push("dropped", out.dropped as f64);
    m.push("skipped", f64::from(out.skipped));
}

/// Plain adjoint-matched update (lean) or the basic-adjoint ablation; TD
/// backup actions come from the fine-tuned field's clipped ODE samples.
pub(crate) fn adjoint_flow_update(agent: &mut Agent, batch: &Batch) -> Result<Metrics> {
    let cfg = agent.cfg.clone();
    let clip = cfg.effective_clip(agent.kind);
    let PolicyNets::AdjointFlow { beta, theta, opt_beta, opt_theta, basic } = &mut agent.policy
    else {
        return Err(QamError::usage("policy does not match the agent kind"));
    };

    let z = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
    let a_next = ode_sample(&*theta, &batch.s_next, &z, cfg.flow_steps)?;

    let out = flow_core(
        *basic,
        &cfg,
        clip,
        &mut agent.critic,
        &mut agent.critic_opts,
        &mut agent.rngs,
        beta,
        theta,
        opt_beta,
        opt_theta,
        batch,
        &a_next,
    )?;
    agent.dropped_trajectories += out.dropped as u64;
    agent.skipped_updates += u64::from(out.skipped);

    let mut m = Metrics::default();
    push_core(&mut m, &out);
    Ok(m)
}

/// Core update plus a distillation/maximization step on the one-step policy;
/// value backups come from the one-step policy itself.
pub(crate) fn one_step_update(agent: &mut Agent, batch: &Batch) -> Result<Metrics> {
    let cfg = agent.cfg.clone();
    let clip = cfg.effective_clip(agent.kind);
    let PolicyNets::OneStep { beta, theta, opt_beta, opt_theta, mu, opt_mu } = &mut agent.policy
    else {
        return Err(QamError::usage("policy does not match the agent kind"));
    };

    let z_td = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
    let a_next = mu
        .forward_batch(&CriticEnsemble::stack(&batch.s_next, &z_td))
        .mapv(|v| v.clamp(-1.0, 1.0));

    let out = flow_core(
        false,
        &cfg,
        clip,
        &mut agent.critic,
        &mut agent.critic_opts,
        &mut agent.rngs,
        beta,
        theta,
        opt_beta,
        opt_theta,
        batch,
        &a_next,
    )?;

    // Distill + maximize with a shared z.
    let z = agent.rngs.actor.normal_mat(batch.len(), cfg.action_dim);
    let target = ode_sample(&*theta, &batch.s, &z, cfg.flow_steps)?;
    let (actor_loss, _) = one_step_actor_step(
        mu,
        opt_mu,
        &agent.critic,
        &batch.s,
        &z,
        &target,
        cfg.alpha,
        clip,
    )?;

    agent.dropped_trajectories += out.dropped as u64;
    agent.skipped_updates += u64::from(out.skipped);

    let mut m = Metrics::default();
    push_core(&mut m, &out);
    m.push("actor_loss", actor_loss);
    Ok(m)
}

/// Core update plus the edit-policy actor step and the temperature step;
/// value backups and acting apply `clip(a + delta)`.
pub(crate) fn edit_update(agent: &mut Agent, batch: &Batch) -> Result<Metrics> {
    let cfg = agent.cfg.clone();
    let clip = cfg.effective_clip(agent.kind);
    let PolicyNets::Edit { beta, theta, opt_beta, opt_theta, edit: edit_net, opt_edit, log_eta, opt_eta } =
        &mut agent.policy
    else {
        return Err(QamError::usage("policy does not match the agent kind"));
    };

    let z_td = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
    let base_next = ode_sample(&*theta, &batch.s_next, &z_td, cfg.flow_steps)?;
    let a_next = if cfg.sigma_a == 0.0 {
        base_next
    } else {
        let eps = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
        let (delta, _) = edit::edit_sample(edit_net, &batch.s_next, &base_next, &eps, cfg.sigma_a);
        (&base_next + &delta).mapv(|v| v.clamp(-1.0, 1.0))
    };

    let out = flow_core(
        false,
        &cfg,
        clip,
        &mut agent.critic,
        &mut agent.critic_opts,
        &mut agent.rngs,
        beta,
        theta,
        opt_beta,
        opt_theta,
        batch,
        &a_next,
    )?;

    let mut m = Metrics::default();
    let (actor_loss, actor_grad_norm, eta, entropy) = if cfg.sigma_a == 0.0 {
        // Zero box: the variant degenerates to the plain update.
        (0.0, 0.0, (*log_eta).exp(), 0.0)
    } else {
        let z = agent.rngs.actor.normal_mat(batch.len(), cfg.action_dim);
        let a_base = ode_sample(&*theta, &batch.s, &z, cfg.flow_steps)?;
        let eps = agent.rngs.actor.normal_mat(batch.len(), cfg.action_dim);
        let eta = (*log_eta).exp();
        let step = edit::edit_actor_step(
            edit_net,
            opt_edit,
            &agent.critic,
            &batch.s,
            &a_base,
            &eps,
            cfg.sigma_a,
            eta,
            clip,
        )?;
        if !step.applied {
            agent.skipped_updates += 1;
        }
        // L(eta) = -eta (E[log pi] + H_target); descent on log eta.
        let h_target = -(cfg.action_dim as f64) / 2.0;
        let grad_log_eta = -eta * (step.mean_logpi + h_target);
        opt_eta.apply(log_eta, grad_log_eta);
        (step.actor_loss, step.grad_norm, (*log_eta).exp(), -step.mean_logpi)
    };

    agent.dropped_trajectories += out.dropped as u64;
    agent.skipped_updates += u64::from(out.skipped);

    push_core(&mut m, &out);
    m.push("actor_loss", actor_loss);
    m.push("actor_grad_norm", actor_grad_norm);
    m.push("eta", eta);
    m.push("entropy_est", entropy);
    Ok(m)
}
