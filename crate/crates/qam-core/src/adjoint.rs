//! Lean and basic adjoint recursions over SDE trajectories, and the
//! adjoint-matching / basic-adjoint-matching / stochastic-optimal-control
//! losses built on them.

use ndarray::{Array1, Array2, Axis};

use crate::critic::CriticEnsemble;
use crate::error::{QamError, Result};
use crate::flow::{NoiseSchedule, SdeTrajectory, Velocity, VelocityField, VelocityVjp};
use crate::nn::{ParamGrads, SeededRng, Tape};

/// Adjoint magnitudes beyond this are treated as blow-ups; the trajectory is
/// dropped from the batch and counted rather than clipped mid-recursion.
pub const ADJOINT_BLOWUP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointKind {
    Lean,
    Basic,
}

/// Backward adjoint iterates aligned with an [`SdeTrajectory`]:
/// `values[i]` sits at node `t_{i+1}` and the last entry is the boundary
/// condition at `t = 1` exactly as supplied.
#[derive(Debug, Clone)]
pub struct AdjointSequence {
    pub kind: AdjointKind,
    pub values: Vec<Array2<f64>>,
    pub valid: Vec<bool>,
}

impl AdjointSequence {
    pub fn at_node(&self, k: usize) -> &Array2<f64> {
        &self.values[k - 1]
    }

    pub fn boundary(&self) -> &Array2<f64> {
        self.values.last().expect("non-empty")
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Boundary condition `g1 = -tau * grad_a Qbar(s, a1)` over the online
/// ensemble mean, elementwise clipped to [-1, 1] when `clip` is set.
pub fn boundary_adjoint(
    critic: &CriticEnsemble,
    s: &Array2<f64>,
    a1: &Array2<f64>,
    tau: f64,
    clip: bool,
) -> Array2<f64> {
    let (_, grad) = critic.q_mean_and_action_grad(s, a1, false);
    boundary_from_grad(&grad, tau, clip)
}

/// The boundary arithmetic on a precomputed action gradient.
pub fn boundary_from_grad(grad: &Array2<f64>, tau: f64, clip: bool) -> Array2<f64> {
    let mut g = grad.mapv(|v| -tau * v);
    if clip {
        g.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }
    g
}

fn update_validity(valid: &mut [bool], g: &Array2<f64>) {
    for (i, row) in g.rows().into_iter().enumerate() {
        if valid[i] && !row.iter().all(|v| v.is_finite() && v.abs() <= ADJOINT_BLOWUP) {
            valid[i] = false;
        }
    }
}

/// Lean adjoint backward sweep through the behavior field only:
/// `g_{t-h} = g_t + h * (2 J_beta(s, a_t, t)^T g_t - g_t / t)`, stepping from
/// `t = 1` down to `t_2` so every interior node receives a value.
pub fn lean_adjoint(
    f_beta: &impl VelocityVjp,
    traj: &SdeTrajectory,
    g1: &Array2<f64>,
) -> Result<AdjointSequence> {
    sweep(AdjointKind::Lean, traj, g1, |t, a, g| {
        let vjp = f_beta.action_vjp(&traj.s, a, t, g);
        vjp.mapv(|v| 2.0 * v) - &(g / t)
    })
}

/// Basic adjoint backward sweep: the drift VJP goes through the field being
/// optimized and each interior step adds the running-cost gradient
/// `(2 / sigma_t^2) grad_a ||f_theta - f_beta||^2`.
///
/// The running term is skipped at the boundary step (`t = 1`): sigma vanishes
/// there and the left-endpoint quadrature of the running cost has no `t = 1`
/// node.
pub fn basic_adjoint(
    f_theta: &impl VelocityVjp,
    f_beta: &impl VelocityVjp,
    traj: &SdeTrajectory,
    g1: &Array2<f64>,
) -> Result<AdjointSequence> {
    let schedule = NoiseSchedule;
    sweep(AdjointKind::Basic, traj, g1, |t, a, g| {
        let vjp = f_theta.action_vjp(&traj.s, a, t, g);
        let mut step = vjp.mapv(|v| 2.0 * v) - &(g / t);
        if t < 1.0 {
            let d = f_theta.velocity(&traj.s, a, t) - f_beta.velocity(&traj.s, a, t);
            let grad_run = (f_theta.action_vjp(&traj.s, a, t, &d)
                - f_beta.action_vjp(&traj.s, a, t, &d))
            .mapv(|v| 2.0 * v);
            step.scaled_add(2.0 / schedule.sigma_sq(t), &grad_run);
        }
        step
    })
}

fn sweep(
    kind: AdjointKind,
    traj: &SdeTrajectory,
    g1: &Array2<f64>,
    mut drift_vjp: impl FnMut(f64, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
) -> Result<AdjointSequence> {
    let t_count = traj.grid.steps();
    if traj.states.len() != t_count {
        return Err(QamError::usage("trajectory/grid length mismatch"));
    }
    if g1.dim() != traj.terminal().dim() {
        return Err(QamError::usage("boundary shape does not match trajectory"));
    }
    let h = traj.grid.h();
    let mut values = vec![Array2::zeros(g1.dim()); t_count];
    let mut valid = traj.valid.clone();
    update_validity(&mut valid, g1);

    values[t_count - 1] = g1.clone();
    let mut g = g1.clone();
    // Update applied at t_k consumes a_{t_k} and produces the value at t_{k-1}.
    for k in (2..=t_count).rev() {
        let t = k as f64 * h;
        let a = &traj.states[k - 1];
        let step = drift_vjp(t, a, &g);
        g = &g + &step.mapv(|v| v * h);
        update_validity(&mut valid, &g);
        values[k - 2] = g.clone();
    }
    Ok(AdjointSequence { kind, values, valid })
}

fn stack_nodes(
    traj: &SdeTrajectory,
    adj: &AdjointSequence,
    f_beta: &impl Velocity,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Vec<usize>)> {
    if adj.values.len() != traj.states.len() {
        return Err(QamError::usage("adjoint sequence is misaligned with the trajectory"));
    }
    let rows: Vec<usize> = (0..traj.batch())
        .filter(|i| traj.valid[*i] && adj.valid[*i])
        .collect();
    if rows.is_empty() {
        return Err(QamError::usage("no valid trajectories in the batch"));
    }
    let schedule = NoiseSchedule;
    let nodes = traj.grid.node_count();
    let dim = traj.terminal().ncols();
    let total = rows.len() * nodes;
    let in_dim = traj.s.ncols() + dim + 1;

    // Stacked rows over (valid sample, node): network input, the 2/sigma row
    // scale, and the constant part sigma * g - (2/sigma) * f_beta.
    let mut inputs = Array2::zeros((total, in_dim));
    let mut scale = Array2::zeros((total, dim));
    let mut offset = Array2::zeros((total, dim));

    let mut r = 0;
    for k in 1..=nodes {
        let t = traj.grid.node(k);
        let sigma = schedule.sigma(t);
        let a = traj.state_at_node(k);
        let g = adj.at_node(k);
        let beta_vals = f_beta.velocity(&traj.s, a, t);
        for &i in &rows {
            for j in 0..traj.s.ncols() {
                inputs[[r, j]] = traj.s[[i, j]];
            }
            for j in 0..dim {
                inputs[[r, traj.s.ncols() + j]] = a[[i, j]];
                scale[[r, j]] = 2.0 / sigma;
                offset[[r, j]] = sigma * g[[i, j]] - (2.0 / sigma) * beta_vals[[i, j]];
            }
            inputs[[r, in_dim - 1]] = t;
            r += 1;
        }
    }
    Ok((inputs, scale, offset, rows))
}

/// Adjoint-matching loss: mean over interior nodes and valid trajectories of
/// `|| 2 (f_theta - f_beta) / sigma_t + sigma_t g_t ||^2`.
///
/// Gradients flow into `theta` only through the explicit `f_theta` term;
/// the trajectory, `f_beta`, sigma, and the adjoints are constants.
pub fn am_loss(
    theta: &VelocityField,
    f_beta: &impl Velocity,
    traj: &SdeTrajectory,
    adj: &AdjointSequence,
) -> Result<(f64, ParamGrads)> {
    if adj.kind != AdjointKind::Lean {
        return Err(QamError::usage("am_loss expects a lean adjoint sequence"));
    }
    matching_loss(theta, f_beta, traj, adj)
}

/// Basic-adjoint-matching loss; same residual with the basic sequence. The
/// adjoint's own dependence on `f_theta` is treated as constant, matching the
/// continuous adjoint method.
pub fn bam_loss(
    theta: &VelocityField,
    f_beta: &impl Velocity,
    traj: &SdeTrajectory,
    adj: &AdjointSequence,
) -> Result<(f64, ParamGrads)> {
    if adj.kind != AdjointKind::Basic {
        return Err(QamError::usage("bam_loss expects a basic adjoint sequence"));
    }
    matching_loss(theta, f_beta, traj, adj)
}

fn matching_loss(
    theta: &VelocityField,
    f_beta: &impl Velocity,
    traj: &SdeTrajectory,
    adj: &AdjointSequence,
) -> Result<(f64, ParamGrads)> {
    let (inputs, scale, offset, rows) = stack_nodes(traj, adj, f_beta)?;
    let total = rows.len() * traj.grid.node_count();

    let mut tape = Tape::new();
    let x = tape.constant(inputs);
    let handle = tape.register(&theta.params, true);
    let out = tape.mlp(&handle, x);
    let sc = tape.constant(scale);
    let off = tape.constant(offset);
    let scaled = tape.mul(out, sc);
    let resid = tape.add(scaled, off);
    let sq = tape.square(resid);
    let sum = tape.sum_all(sq);
    let loss = tape.scale(sum, 1.0 / total as f64);

    let value = tape.scalar(loss);
    let grads = tape.backward_scalar(loss)?;
    Ok((value, grads.of_mlp(&handle, &theta.params)))
}

/// Value of the matching residual for any pair of fields (no gradients);
/// used by diagnostics and the stationarity checks.
pub fn matching_loss_value(
    f_theta: &impl Velocity,
    f_beta: &impl Velocity,
    traj: &SdeTrajectory,
    adj: &AdjointSequence,
) -> Result<f64> {
    if adj.values.len() != traj.states.len() {
        return Err(QamError::usage("adjoint sequence is misaligned with the trajectory"));
    }
    let rows: Vec<usize> = (0..traj.batch())
        .filter(|i| traj.valid[*i] && adj.valid[*i])
        .collect();
    if rows.is_empty() {
        return Err(QamError::usage("no valid trajectories in the batch"));
    }
    let schedule = NoiseSchedule;
    let mut acc = 0.0;
    for k in 1..=traj.grid.node_count() {
        let t = traj.grid.node(k);
        let sigma = schedule.sigma(t);
        let a = traj.state_at_node(k);
        let g = adj.at_node(k);
        let d = f_theta.velocity(&traj.s, a, t) - f_beta.velocity(&traj.s, a, t);
        for &i in &rows {
            for j in 0..d.ncols() {
                let r = 2.0 * d[[i, j]] / sigma + sigma * g[[i, j]];
                acc += r * r;
            }
        }
    }
    Ok(acc / (rows.len() * traj.grid.node_count()) as f64)
}

/// Stochastic-optimal-control objective evaluated on a stored trajectory:
/// `sum_k h (2 / sigma_k^2) ||f_theta - f_beta||^2 - tau * Qbar(s, a_1)`,
/// averaged over valid rows. No gradients.
pub fn soc_loss_value(
    f_theta: &impl Velocity,
    f_beta: &impl Velocity,
    traj: &SdeTrajectory,
    critic: &CriticEnsemble,
    tau: f64,
) -> Result<f64> {
    let rows: Vec<usize> = (0..traj.batch()).filter(|i| traj.valid[*i]).collect();
    if rows.is_empty() {
        return Err(QamError::usage("no valid trajectories in the batch"));
    }
    let schedule = NoiseSchedule;
    let h = traj.grid.h();
    let mut running = Array1::<f64>::zeros(traj.batch());
    for k in 1..=traj.grid.node_count() {
        let t = traj.grid.node(k);
        let w = 2.0 / schedule.sigma_sq(t);
        let a = traj.state_at_node(k);
        let d = f_theta.velocity(&traj.s, a, t) - f_beta.velocity(&traj.s, a, t);
        let sq = d.mapv(|v| v * v).sum_axis(Axis(1));
        running.scaled_add(h * w, &sq);
    }
    let q = critic.mean_value(&traj.s, traj.terminal(), false);
    let mut acc = 0.0;
    for &i in &rows {
        acc += running[i] - tau * q[i];
    }
    Ok(acc / rows.len() as f64)
}

/// SOC objective with full backpropagation through a freshly recorded SDE
/// chain (the unstable alternative the adjoint route avoids). Used by the
/// BPTT-style baseline and diagnostics.
pub fn soc_loss_bptt(
    theta: &VelocityField,
    f_beta: &VelocityField,
    s: &Array2<f64>,
    grid: crate::flow::TimeGrid,
    critic: &CriticEnsemble,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<(f64, ParamGrads)> {
    let batch = s.nrows();
    if batch == 0 {
        return Err(QamError::usage("soc_loss on an empty batch"));
    }
    let schedule = NoiseSchedule;
    let dim = theta.action_dim;
    let h = grid.h();

    let mut tape = Tape::new();
    let s_const = tape.constant(s.clone());
    let theta_h = tape.register(&theta.params, true);
    let beta_h = tape.register(&f_beta.params, false);
    let t_count = grid.steps();

    let mut a = tape.constant(rng.normal_mat(batch, dim));
    let mut running: Option<crate::nn::NodeId> = None;
    for k in 1..t_count {
        let t = k as f64 * h;
        let t_col = tape.constant(Array2::from_elem((batch, 1), t));
        let x = tape.concat(&[s_const, a, t_col]);
        let f_t = tape.mlp(&theta_h, x);
        let f_b = tape.mlp(&beta_h, x);

        // running cost h * (2 / sigma^2) ||f_theta - f_beta||^2
        let d = tape.sub(f_t, f_b);
        let dsq = tape.square(d);
        let node_sum = tape.sum_all(dsq);
        let weighted = tape.scale(node_sum, h * 2.0 / schedule.sigma_sq(t));
        running = Some(match running {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });

        // a <- a (1 - h/t) + 2h f_theta + sqrt(2h(1-t)/t) z
        let keep = tape.scale(a, 1.0 - h / t);
        let drift = tape.scale(f_t, 2.0 * h);
        let z = rng.normal_mat(batch, dim);
        let noise = tape.constant(z.mapv(|v| v * h.sqrt() * schedule.sigma(t)));
        let moved = tape.add(keep, drift);
        a = tape.add(moved, noise);
    }

    // Terminal -tau * Qbar(s, a_1) through frozen critics.
    let sa = tape.concat(&[s_const, a]);
    let mut q_sum: Option<crate::nn::NodeId> = None;
    for member in &critic.members {
        let ch = tape.register(member, false);
        let q = tape.mlp(&ch, sa);
        let qs = tape.sum_all(q);
        q_sum = Some(match q_sum {
            None => qs,
            Some(acc) => tape.add(acc, qs),
        });
    }
    let q_mean = tape.scale(q_sum.expect("K >= 1"), 1.0 / critic.k() as f64);
    let q_term = tape.scale(q_mean, -tau);
    let pre = match running {
        Some(r) => tape.add(r, q_term),
        None => q_term,
    };
    let loss = tape.scale(pre, 1.0 / batch as f64);
    let value = tape.scalar(loss);
    let grads = tape.backward_scalar(loss)?;
    Ok((value, grads.of_mlp(&theta_h, &theta.params)))
}
