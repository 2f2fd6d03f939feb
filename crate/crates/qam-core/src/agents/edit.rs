//! Bounded tanh-Gaussian edit head: `(s, a) -> (mean, log_std)`, edit
//! `delta = sigma_a * tanh(mean + std * eps)`, with the exact change-of-
//! variables log-density and automatic entropy tuning on log eta.

use ndarray::{Array1, Array2};

use crate::critic::CriticEnsemble;
use crate::error::Result;
use crate::nn::{AdamState, ParamGrads, ParameterSet, Tape};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Samples edits without recording: returns the bounded edit `delta` (every
/// entry within `sigma_a` in magnitude by construction) and the per-row
/// log-density `log pi(delta | s, a_base)`.
pub fn edit_sample(
    edit: &ParameterSet,
    s: &Array2<f64>,
    a_base: &Array2<f64>,
    eps: &Array2<f64>,
    sigma_a: f64,
) -> (Array2<f64>, Array1<f64>) {
    let batch = s.nrows();
    let dim = a_base.ncols();
    let out = edit.forward_batch(&CriticEnsemble::stack(s, a_base));
    let mut delta = Array2::zeros((batch, dim));
    let mut logpi = Array1::zeros(batch);
    for i in 0..batch {
        let mut lp = 0.0;
        for j in 0..dim {
            let mean = out[[i, j]];
            let log_std = out[[i, dim + j]].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let u = mean + log_std.exp() * eps[[i, j]];
            delta[[i, j]] = sigma_a * u.tanh();
            // log N(u; mean, std) - ln(sigma_a (1 - tanh^2 u)), with the
            // sech^2 term in its overflow-free form.
            lp += -0.5 * eps[[i, j]] * eps[[i, j]] - log_std - HALF_LN_2PI;
            lp -= sigma_a.ln();
            lp -= 2.0 * (2.0_f64.ln() - u - softplus(-2.0 * u));
        }
        logpi[i] = lp;
    }
    (delta, logpi)
}

/// Monte-Carlo entropy estimate `-E[log pi]` over fresh eps draws.
pub fn edit_entropy_estimate(
    edit: &ParameterSet,
    s: &Array2<f64>,
    a_base: &Array2<f64>,
    sigma_a: f64,
    rng: &mut crate::nn::SeededRng,
) -> f64 {
    let eps = rng.normal_mat(s.nrows(), a_base.ncols());
    let (_, logpi) = edit_sample(edit, s, a_base, &eps, sigma_a);
    -logpi.mean().unwrap_or(0.0)
}

pub(crate) struct EditStepOut {
    pub actor_loss: f64,
    pub mean_logpi: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

/// One reparameterized actor step: minimizes
/// `mean(-Qbar(s, a_base + delta) + eta * log pi(delta))` with the critic
/// frozen and `a_base` constant.
#[allow(clippy::too_many_arguments)]
pub(crate) fn edit_actor_step(
    edit: &mut ParameterSet,
    opt: &mut AdamState,
    critic: &CriticEnsemble,
    s: &Array2<f64>,
    a_base: &Array2<f64>,
    eps: &Array2<f64>,
    sigma_a: f64,
    eta: f64,
    clip: Option<f64>,
) -> Result<EditStepOut> {
    let batch = s.nrows();
    let dim = a_base.ncols();

    let mut tape = Tape::new();
    let s_node = tape.constant(s.clone());
    let base_node = tape.constant(a_base.clone());
    let handle = tape.register(edit, true);
    let x = tape.concat(&[s_node, base_node]);
    let out = tape.mlp(&handle, x);
    let mean = tape.slice_cols(out, 0, dim);
    let raw_ls = tape.slice_cols(out, dim, dim);
    let log_std = tape.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX);
    let std = tape.exp(log_std);
    let eps_node = tape.constant(eps.clone());
    let noise = tape.mul(std, eps_node);
    let u = tape.add(mean, noise);
    let th = tape.tanh(u);
    let delta = tape.scale(th, sigma_a);
    let a_final = tape.add(base_node, delta);

    // Frozen ensemble-mean Q at the edited action.
    let sa = tape.concat(&[s_node, a_final]);
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

    // Per-row log-density: constant part gathers the eps, 2pi, sigma_a and
    // ln 4 terms; the rest differentiates through log_std and u.
    let mut const_col = Array2::zeros((batch, 1));
    for i in 0..batch {
        let mut c = 0.0;
        for j in 0..dim {
            c += -0.5 * eps[[i, j]] * eps[[i, j]];
        }
        c -= dim as f64 * (HALF_LN_2PI + sigma_a.ln() + 2.0 * 2.0_f64.ln());
        const_col[[i, 0]] = c;
    }
    let const_node = tape.constant(const_col);
    let ls_sum = tape.sum_rows(log_std);
    let neg_ls = tape.scale(ls_sum, -1.0);
    let u_sum = tape.sum_rows(u);
    let two_u = tape.scale(u_sum, 2.0);
    let neg_two_u = tape.scale(u, -2.0);
    let sp = tape.softplus(neg_two_u);
    let sp_sum = tape.sum_rows(sp);
    let two_sp = tape.scale(sp_sum, 2.0);
    let t1 = tape.add(const_node, neg_ls);
    let t2 = tape.add(t1, two_u);
    let logpi = tape.add(t2, two_sp);

    let neg_q = tape.scale(q_mean, -1.0);
    let ent_term = tape.scale(logpi, eta);
    let per_row = tape.add(neg_q, ent_term);
    let loss = tape.mean_all(per_row);

    let actor_loss = tape.scalar(loss);
    let mean_logpi = tape.value(logpi).mean().unwrap_or(0.0);
    let grads = tape.backward_scalar(loss)?;
    let pg: ParamGrads = grads.of_mlp(&handle, edit);
    let report = opt.apply(edit, &pg, clip);
    Ok(EditStepOut {
        actor_loss,
        mean_logpi,
        grad_norm: report.grad_norm,
        applied: report.applied,
    })
}
