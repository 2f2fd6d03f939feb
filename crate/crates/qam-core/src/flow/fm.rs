use ndarray::{Array1, Array2, Axis};

use crate::error::{QamError, Result};
use crate::flow::field::VelocityField;
use crate::nn::{ParamGrads, SeededRng, Tape};

/// Flow-matching loss and parameter gradients for one batch:
/// mean over rows of `|| f(s, (1-t) z + t a, t) - (a - z) ||^2` with
/// `t ~ U[0,1]` and `z ~ N(0, I)` drawn per row (t first, then z).
///
/// `weights`, when given, scale each row's squared residual and are treated
/// as constants (the advantage-weighted variant).
pub fn fm_loss(
    field: &VelocityField,
    s: &Array2<f64>,
    a: &Array2<f64>,
    weights: Option<&Array1<f64>>,
    rng: &mut SeededRng,
) -> Result<(f64, ParamGrads)> {
    let batch = s.nrows();
    if batch == 0 {
        return Err(QamError::usage("fm_loss on an empty batch"));
    }
    if a.nrows() != batch {
        return Err(QamError::config("state/action row mismatch"));
    }
    let dim = field.action_dim;

    let t = rng.uniform_vec(batch, 0.0, 1.0);
    let z = rng.normal_mat(batch, dim);

    // x_t = (1 - t) z + t a, rowwise; target velocity a - z.
    let mut x_t = Array2::zeros((batch, dim));
    for i in 0..batch {
        let ti = t[i];
        for j in 0..dim {
            x_t[[i, j]] = (1.0 - ti) * z[[i, j]] + ti * a[[i, j]];
        }
    }
    let target = a - &z;

    let mut tape = Tape::new();
    let input = tape.constant(VelocityField::stack_input_rows(s, &x_t, &t));
    let handle = tape.register(&field.params, true);
    let out = tape.mlp(&handle, input);
    let tgt = tape.constant(target);
    let resid = tape.sub(out, tgt);
    let sq = tape.square(resid);
    let loss = match weights {
        Some(w) => {
            if w.len() != batch {
                return Err(QamError::config("weight length mismatch"));
            }
            let mut w_mat = Array2::zeros((batch, dim));
            for i in 0..batch {
                w_mat.row_mut(i).fill(w[i]);
            }
            let w_node = tape.constant(w_mat);
            let weighted = tape.mul(sq, w_node);
            let total = tape.sum_all(weighted);
            tape.scale(total, 1.0 / batch as f64)
        }
        None => {
            let total = tape.sum_all(sq);
            tape.scale(total, 1.0 / batch as f64)
        }
    };

    let value = tape.scalar(loss);
    let grads = tape.backward_scalar(loss)?;
    Ok((value, grads.of_mlp(&handle, &field.params)))
}

/// Monte-Carlo estimate of the flow-matching loss without gradients,
/// reusing the same draw order as [`fm_loss`].
pub fn fm_loss_value(
    field: &VelocityField,
    s: &Array2<f64>,
    a: &Array2<f64>,
    rng: &mut SeededRng,
) -> Result<f64> {
    let batch = s.nrows();
    if batch == 0 {
        return Err(QamError::usage("fm_loss on an empty batch"));
    }
    let dim = field.action_dim;
    let t = rng.uniform_vec(batch, 0.0, 1.0);
    let z = rng.normal_mat(batch, dim);
    let mut x_t = Array2::zeros((batch, dim));
    for i in 0..batch {
        let ti = t[i];
        for j in 0..dim {
            x_t[[i, j]] = (1.0 - ti) * z[[i, j]] + ti * a[[i, j]];
        }
    }
    let out = field
        .params
        .forward_batch(&VelocityField::stack_input_rows(s, &x_t, &t));
    let resid = &out - &(a - &z);
    Ok(resid.mapv(|v| v * v).sum_axis(Axis(1)).mean().unwrap_or(0.0))
}
