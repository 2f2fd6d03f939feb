//! Baseline procedures: advantage-weighted flow cloning, backprop through the
//! sampler, and classifier guidance from the critic's action gradient.

use ndarray::{Array1, Array2};

use crate::agents::updates::critic_step;
use crate::agents::{Agent, Metrics, PolicyNets};
use crate::critic::CriticEnsemble;
use crate::env::Batch;
use crate::error::{QamError, Result};
use crate::flow::{fm_loss, VelocityField, Velocity};
use crate::nn::Tape;

/// Guided velocity `f_beta + vartheta * ((1 - t) tau grad_a Qbar(s, a) + a) / t`
/// using the online ensemble mean at the noisy action. Defined for t >= h
/// (the grid excludes zero).
pub fn cgql_velocity(
    f_beta: &VelocityField,
    critic: &CriticEnsemble,
    s: &Array2<f64>,
    a: &Array2<f64>,
    t: f64,
    vartheta: f64,
    tau: f64,
) -> Result<Array2<f64>> {
    if t <= 0.0 {
        return Err(QamError::domain("guided velocity undefined at t = 0"));
    }
    let base = f_beta.velocity(s, a, t);
    if vartheta == 0.0 {
        return Ok(base);
    }
    let (_, grad) = critic.q_mean_and_action_grad(s, a, false);
    let mut guidance = grad.mapv(|g| (1.0 - t) * tau * g);
    guidance += a;
    guidance.mapv_inplace(|v| v / t);
    Ok(base + &guidance.mapv(|v| vartheta * v))
}

/// Euler sampler for the guided field. The k = 0 step uses the behavior
/// velocity alone (the guidance term divides by t); guidance applies from
/// t = h on. Terminal elementwise clip as in the plain ODE sampler.
pub fn guided_ode(
    f_beta: &VelocityField,
    critic: &CriticEnsemble,
    s: &Array2<f64>,
    z0: &Array2<f64>,
    steps: usize,
    vartheta: f64,
    tau: f64,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(QamError::config("guided_ode needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut a = z0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let drift = if k == 0 {
            f_beta.velocity(s, &a, t)
        } else {
            cgql_velocity(f_beta, critic, s, &a, t, vartheta, tau)?
        };
        a.scaled_add(h, &drift);
    }
    a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(a)
}

/// Advantage-weighted update: critic and value regress to the same
/// pessimistic target (backups from this agent's own flow), then one
/// weighted cloning step with `w = min(exp(tau (Q - V)), 100)` as constants.
pub(crate) fn fawac_update(agent: &mut Agent, batch: &Batch) -> Result<Metrics> {
    let cfg = agent.cfg.clone();
    let clip = cfg.effective_clip(agent.kind);
    let PolicyNets::Fawac { flow, opt_flow, value, opt_value } = &mut agent.policy else {
        return Err(QamError::usage("policy does not match the agent kind"));
    };

    let z = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
    let a_next = crate::flow::ode_sample(&*flow, &batch.s_next, &z, cfg.flow_steps)?;
    let y = agent
        .critic
        .pessimistic_target(&batch.s_next, &a_next, &batch.r, &batch.done, cfg.gamma);

    let (td_loss, grads) = agent.critic.td_loss(&batch.s, &batch.a, &y)?;
    let mut critic_norm = 0.0;
    for ((member, opt), g) in agent
        .critic
        .members
        .iter_mut()
        .zip(agent.critic_opts.iter_mut())
        .zip(grads.iter())
    {
        critic_norm += opt.apply(member, g, clip).grad_norm;
    }
    critic_norm /= agent.critic.k() as f64;

    // V regresses to the same target.
    let value_loss = {
        let mut tape = Tape::new();
        let x = tape.constant(batch.s.clone());
        let yt = tape.constant(crate::nn::mlp::column(&y));
        let handle = tape.register(value, true);
        let v = tape.mlp(&handle, x);
        let resid = tape.sub(v, yt);
        let sq = tape.square(resid);
        let loss = tape.mean_all(sq);
        let val = tape.scalar(loss);
        let g = tape.backward_scalar(loss)?;
        let pg = g.of_mlp(&handle, value);
        opt_value.apply(value, &pg, clip);
        val
    };

    // Clipped exponential advantage weights, constant w.r.t. gradients.
    let q_data = agent.critic.mean_value(&batch.s, &batch.a, false);
    let v_data = value.forward_batch(&batch.s);
    let mut weights = Array1::zeros(batch.len());
    for i in 0..batch.len() {
        weights[i] = (cfg.tau * (q_data[i] - v_data[[i, 0]])).exp().min(100.0);
    }
    let mean_weight = weights.mean().unwrap_or(1.0);

    let (fm, fm_grads) = fm_loss(flow, &batch.s, &batch.a, Some(&weights), &mut agent.rngs.fm)?;
    opt_flow.apply(&mut flow.params, &fm_grads, clip);

    agent.critic.update_targets();

    let mut m = Metrics::default();
    m.push("td_loss", td_loss);
    m.push("value_loss", value_loss);
    m.push("fm_loss", fm);
    m.push("mean_weight", mean_weight);
    m.push("critic_grad_norm", critic_norm);
    m.push("dropped", 0.0);
    m.push("skipped", 0.0);
    Ok(m)
}

/// Cloning plus backprop through the full denoising chain:
/// `alpha_bc * L_FM - mean Qbar(s, Clip[ODE(z)])`. Non-finite BPTT gradients
/// skip the policy step and are counted.
pub(crate) fn fbrac_update(agent: &mut Agent, batch: &Batch) -> Result<Metrics> {
    let cfg = agent.cfg.clone();
    let clip = cfg.effective_clip(agent.kind);
    let PolicyNets::Fbrac { flow, opt_flow } = &mut agent.policy else {
        return Err(QamError::usage("policy does not match the agent kind"));
    };

    let z = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
    let a_next = crate::flow::ode_sample(&*flow, &batch.s_next, &z, cfg.flow_steps)?;
    let (td_loss, critic_norm) = critic_step(
        &mut agent.critic,
        &mut agent.critic_opts,
        batch,
        &a_next,
        cfg.gamma,
        clip,
    )?;

    // Recorded ODE chain: a_{k+1} = a_k + h f(s, a_k, kh), terminal clip,
    // then -Qbar through frozen critics.
    let steps = cfg.flow_steps;
    let h = 1.0 / steps as f64;
    let z0 = agent.rngs.actor.normal_mat(batch.len(), cfg.action_dim);
    let mut tape = Tape::new();
    let s_node = tape.constant(batch.s.clone());
    let handle = tape.register(&flow.params, true);
    let mut a = tape.constant(z0);
    for k in 0..steps {
        let t = k as f64 * h;
        let t_col = tape.constant(Array2::from_elem((batch.len(), 1), t));
        let x = tape.concat(&[s_node, a, t_col]);
        let f = tape.mlp(&handle, x);
        let df = tape.scale(f, h);
        a = tape.add(a, df);
    }
    let a_clipped = tape.clip(a, -1.0, 1.0);
    let sa = tape.concat(&[s_node, a_clipped]);
    let mut q_sum = None;
    for member in &agent.critic.members {
        let ch = tape.register(member, false);
        let q = tape.mlp(&ch, sa);
        q_sum = Some(match q_sum {
            None => q,
            Some(acc) => tape.add(acc, q),
        });
    }
    let q_mean = tape.scale(q_sum.expect("K >= 1"), 1.0 / agent.critic.k() as f64);
    let q_avg = tape.mean_all(q_mean);
    let bptt = tape.scale(q_avg, -1.0);
    let bptt_value = tape.scalar(bptt);
    let g = tape.backward_scalar(bptt)?;
    let mut policy_grads = g.of_mlp(&handle, &flow.params);

    let (fm, fm_grads) = fm_loss(flow, &batch.s, &batch.a, None, &mut agent.rngs.fm)?;
    let mut scaled_fm = fm_grads;
    scaled_fm.scale(cfg.alpha_bc);
    policy_grads.add(&scaled_fm);

    let rep = opt_flow.apply(&mut flow.params, &policy_grads, clip);
    let skipped = !rep.applied;
    agent.skipped_updates += u64::from(skipped);

    agent.critic.update_targets();

    let mut m = Metrics::default();
    m.push("td_loss", td_loss);
    m.push("policy_loss", cfg.alpha_bc * fm + bptt_value);
    m.push("fm_loss", fm);
    m.push("bptt_term", bptt_value);
    m.push("critic_grad_norm", critic_norm);
    m.push("policy_grad_norm", rep.grad_norm);
    m.push("dropped", 0.0);
    m.push("skipped", f64::from(skipped));
    Ok(m)
}

/// Classifier-guidance baseline: plain cloning on the behavior field, value
/// backups and acting through the guided sampler.
pub(crate) fn cgql_update(agent: &mut Agent, batch: &Batch) -> Result<Metrics> {
    let cfg = agent.cfg.clone();
    let clip = cfg.effective_clip(agent.kind);
    let PolicyNets::Cgql { beta, opt_beta } = &mut agent.policy else {
        return Err(QamError::usage("policy does not match the agent kind"));
    };

    let z = agent.rngs.td.normal_mat(batch.len(), cfg.action_dim);
    let a_next = guided_ode(
        &*beta,
        &agent.critic,
        &batch.s_next,
        &z,
        cfg.flow_steps,
        cfg.vartheta,
        cfg.tau,
    )?;
    let (td_loss, critic_norm) = critic_step(
        &mut agent.critic,
        &mut agent.critic_opts,
        batch,
        &a_next,
        cfg.gamma,
        clip,
    )?;

    let (fm, fm_grads) = fm_loss(beta, &batch.s, &batch.a, None, &mut agent.rngs.fm)?;
    opt_beta.apply(&mut beta.params, &fm_grads, clip);

    agent.critic.update_targets();

    let mut m = Metrics::default();
    m.push("td_loss", td_loss);
    m.push("fm_loss", fm);
    m.push("critic_grad_norm", critic_norm);
    m.push("dropped", 0.0);
    m.push("skipped", 0.0);
    Ok(m)
}
