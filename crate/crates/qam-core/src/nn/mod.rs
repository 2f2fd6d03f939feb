//! Reverse-mode automatic differentiation over dense batches, small MLPs,
//! Adam with global-norm clipping, EMA target tracking, and seeded RNG streams.

pub mod adam;
pub mod checkpoint;
pub mod ema;
pub mod graph;
pub mod mlp;
pub mod rng;

pub use adam::{AdamState, ScalarAdam, StepReport};
pub use ema::EmaTracker;
pub use graph::{Grads, MlpHandle, NodeId, Tape};
pub use mlp::{Activation, ForwardCache, Layer, ParamGrads, ParameterSet};
pub use rng::SeededRng;

use ndarray::{Array1, Axis};

use crate::error::{QamError, Result};

/// A recorded single-input forward pass, replayable in reverse exactly once.
pub struct RecordedForward {
    tape: Tape,
    handle: MlpHandle,
    input: NodeId,
    output: NodeId,
}

impl RecordedForward {
    pub fn output(&self) -> Array1<f64> {
        self.tape.value(self.output).row(0).to_owned()
    }
}

/// Single-sample forward pass that also records the tape for [`backward`].
pub fn mlp_forward(params: &ParameterSet, input: &[f64]) -> Result<(Array1<f64>, RecordedForward)> {
    if input.len() != params.in_dim() {
        return Err(QamError::config(format!(
            "input length {} does not match first layer input {}",
            input.len(),
            params.in_dim()
        )));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(QamError::domain("non-finite input"));
    }
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.input(
        Array1::from_vec(input.to_vec()).insert_axis(Axis(0)),
    );
    let handle = tape.register(params, true);
    let out = tape.mlp(&handle, x);
    let value = tape.value(out).row(0).to_owned();
    Ok((value, RecordedForward { tape, handle, input: x, output: out }))
}

/// One reverse sweep: returns `J^T c` for the parameters and the input.
/// Consuming the same recording twice is a usage error.
pub fn backward(
    recorded: &mut RecordedForward,
    cotangent: &[f64],
    params: &ParameterSet,
) -> Result<(ParamGrads, Array1<f64>)> {
    let out_dim = recorded.tape.value(recorded.output).ncols();
    if cotangent.len() != out_dim {
        return Err(QamError::config(format!(
            "cotangent length {} does not match output length {}",
            cotangent.len(),
            out_dim
        )));
    }
    let seed = Array1::from_vec(cotangent.to_vec()).insert_axis(Axis(0));
    let grads = recorded.tape.backward(recorded.output, seed)?;
    let param_grads = grads.of_mlp(&recorded.handle, params);
    let input_grad = grads
        .of(recorded.input)
        .map(|g| g.row(0).to_owned())
        .unwrap_or_else(|| Array1::zeros(params.in_dim()));
    Ok((param_grads, input_grad))
}

/// Central finite-difference gradient of `f` with respect to `params`,
/// the independent oracle used by the gradient checks.
pub fn finite_difference_grads(
    params: &ParameterSet,
    step: f64,
    mut f: impl FnMut(&ParameterSet) -> f64,
) -> ParamGrads {
    let mut flat = params.flatten();
    let mut grads = Vec::with_capacity(flat.len());
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        probe.assign_flat(&flat).expect("shapes unchanged");
        let up = f(&probe);
        flat[i] = orig - step;
        probe.assign_flat(&flat).expect("shapes unchanged");
        let down = f(&probe);
        flat[i] = orig;
        grads.push((up - down) / (2.0 * step));
    }
    probe.assign_flat(&flat).expect("shapes unchanged");
    let mut out = ParamGrads::zeros_like(params);
    let mut k = 0;
    for (w, b) in &mut out.layers {
        for v in w.iter_mut() {
            *v = grads[k];
            k += 1;
        }
        for v in b.iter_mut() {
            *v = grads[k];
            k += 1;
        }
    }
    out
}

/// Relative-error comparison with an absolute floor, shared by the
/// finite-difference checks here and in the acceptance suite.
pub fn close_rel(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= floor || diff <= rel * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn identity_params(n: usize) -> ParameterSet {
        ParameterSet {
            layers: vec![Layer { w: Array2::eye(n), b: Array1::zeros(n), act: Activation::Identity }],
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = identity_params(2);
        let (out, _) = mlp_forward(&p, &[1.0, 2.0]).unwrap();
        assert_eq!(out, array![1.0, 2.0]);
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let p = ParameterSet {
            layers: vec![Layer {
                w: Array2::zeros((2, 3)),
                b: array![0.5, -1.5],
                act: Activation::Identity,
            }],
        };
        let (out, _) = mlp_forward(&p, &[3.0, -7.0, 11.0]).unwrap();
        assert_eq!(out, array![0.5, -1.5]);
    }

    #[test]
    fn two_layer_net_matches_straightforward_matmul() {
        // Independent oracle: plain nested-loop affine composition.
        let mut rng = SeededRng::named(11, "matmul-oracle");
        let p = ParameterSet::mlp(3, 4, 1, 2, Activation::Tanh, &mut rng);
        let x = [0.3, -0.8, 1.1];

        let mut h: Vec<f64> = x.to_vec();
        for layer in &p.layers {
            let mut next = vec![0.0; layer.out_dim()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut acc = layer.b[o];
                for (i, &xi) in h.iter().enumerate() {
                    acc += layer.w[[o, i]] * xi;
                }
                *slot = layer.act.apply(acc);
            }
            h = next;
        }

        let (out, _) = mlp_forward(&p, &x).unwrap();
        for (a, b) in out.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch_and_nonfinite() {
        let p = identity_params(2);
        assert!(matches!(mlp_forward(&p, &[1.0]), Err(QamError::Config(_))));
        assert!(matches!(
            mlp_forward(&p, &[f64::NAN, 0.0]),
            Err(QamError::Domain(_))
        ));
    }

    #[test]
    fn backward_identity_jacobian() {
        let p = identity_params(2);
        let (_, mut rec) = mlp_forward(&p, &[5.0, -3.0]).unwrap();
        let (_, input_grad) = backward(&mut rec, &[1.0, 0.0], &p).unwrap();
        assert_eq!(input_grad, array![1.0, 0.0]);
    }

    #[test]
    fn backward_zero_cotangent_zeroes_everything() {
        let mut rng = SeededRng::named(5, "zero-cotangent");
        let p = ParameterSet::mlp(2, 8, 2, 2, Activation::Gelu, &mut rng);
        let (_, mut rec) = mlp_forward(&p, &[0.4, -0.2]).unwrap();
        let (pg, ig) = backward(&mut rec, &[0.0, 0.0], &p).unwrap();
        assert!(pg.flatten().iter().all(|v| *v == 0.0));
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_twice_is_a_usage_error() {
        let p = identity_params(2);
        let (_, mut rec) = mlp_forward(&p, &[1.0, 1.0]).unwrap();
        backward(&mut rec, &[1.0, 1.0], &p).unwrap();
        assert!(matches!(
            backward(&mut rec, &[1.0, 1.0], &p),
            Err(QamError::Usage(_))
        ));
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Random 2-16-2 net, loss = <c, f(x)>; rel. tol 1e-4 with abs floor 1e-8.
        let mut rng = SeededRng::named(17, "fd-oracle");
        let p = ParameterSet::mlp(2, 16, 1, 2, Activation::Gelu, &mut rng);
        let x = [0.7, -0.3];
        let c = [0.9, -1.4];

        let (_, mut rec) = mlp_forward(&p, &x).unwrap();
        let (pg, ig) = backward(&mut rec, &c, &p).unwrap();

        let fd = finite_difference_grads(&p, 1e-4, |probe| {
            let (out, _) = mlp_forward(probe, &x).unwrap();
            out.iter().zip(c.iter()).map(|(o, ci)| o * ci).sum()
        });
        for (a, b) in pg.flatten().iter().zip(fd.flatten().iter()) {
            assert!(close_rel(*a, *b, 1e-4, 1e-8), "param grad {a} vs fd {b}");
        }

        // Input gradient against finite differences on x.
        for i in 0..x.len() {
            let h = 1e-4;
            let mut xp = x;
            xp[i] += h;
            let (up, _) = mlp_forward(&p, &xp).unwrap();
            xp[i] -= 2.0 * h;
            let (down, _) = mlp_forward(&p, &xp).unwrap();
            let fd_i: f64 = up
                .iter()
                .zip(down.iter())
                .zip(c.iter())
                .map(|((u, d), ci)| (u - d) / (2.0 * h) * ci)
                .sum();
            assert!(close_rel(ig[i], fd_i, 1e-4, 1e-8), "input grad {} vs fd {}", ig[i], fd_i);
        }
    }

    #[test]
    fn vjp_is_linear_in_the_cotangent() {
        let mut rng = SeededRng::named(23, "vjp-linearity");
        let p = ParameterSet::mlp(3, 8, 2, 2, Activation::Gelu, &mut rng);
        let x = [0.1, 0.2, -0.5];
        let u = [1.3, -0.4];
        let v = [0.6, 2.2];
        let (alpha, beta) = (0.37, -1.91);

        let run = |cot: &[f64]| {
            let (_, mut rec) = mlp_forward(&p, &x).unwrap();
            let (pg, ig) = backward(&mut rec, cot, &p).unwrap();
            (pg.flatten(), ig)
        };
        let (pu, iu) = run(&u);
        let (pv, iv) = run(&v);
        let mixed: Vec<f64> = u
            .iter()
            .zip(v.iter())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let (pm, im) = run(&mixed);

        for ((m, a), b) in pm.iter().zip(pu.iter()).zip(pv.iter()) {
            assert!((m - (alpha * a + beta * b)).abs() < 1e-12);
        }
        for ((m, a), b) in im.iter().zip(iu.iter()).zip(iv.iter()) {
            assert!((m - (alpha * a + beta * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_vjp_input_matches_tape() {
        let mut rng = SeededRng::named(29, "vjp-batch");
        let p = ParameterSet::mlp(3, 8, 2, 2, Activation::Gelu, &mut rng);
        let x = rng.normal_mat(5, 3);
        let cot = rng.normal_mat(5, 2);

        let (_, cache) = p.forward_cached(&x);
        let fast = p.vjp_input(&cache, &cot);

        for row in 0..5 {
            let xi: Vec<f64> = x.row(row).to_vec();
            let ci: Vec<f64> = cot.row(row).to_vec();
            let (_, mut rec) = mlp_forward(&p, &xi).unwrap();
            let (_, ig) = backward(&mut rec, &ci, &p).unwrap();
            for j in 0..3 {
                assert!((fast[[row, j]] - ig[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_clips_to_global_norm() {
        // ||g||_2 = 4 against clip 1: effective gradient scaled by 0.25, so the
        // very first bias-corrected update equals -lr * sign(g).
        let mut p = ParameterSet {
            layers: vec![Layer {
                w: array![[0.0, 0.0], [0.0, 0.0]],
                b: array![0.0, 0.0],
                act: Activation::Identity,
            }],
        };
        let mut grads = ParamGrads::zeros_like(&p);
        grads.layers[0].0 = array![[2.0, 2.0], [2.0, 2.0]];
        assert_eq!(grads.global_norm(), 4.0);

        let mut clipped = grads.clone();
        clipped.scale(0.25);

        let mut state_a = AdamState::new(&p, 0.1);
        let mut pa = p.clone();
        state_a.apply(&mut pa, &grads, Some(1.0));

        let mut state_b = AdamState::new(&p, 0.1);
        state_b.apply(&mut p, &clipped, None);

        for (a, b) in pa.flatten().iter().zip(p.flatten().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradients_leave_fresh_state_unchanged() {
        let mut rng = SeededRng::named(31, "adam-zero");
        let mut p = ParameterSet::mlp(2, 4, 1, 1, Activation::Gelu, &mut rng);
        let before = p.flatten();
        let mut state = AdamState::new(&p, 0.1);
        let grads = ParamGrads::zeros_like(&p);
        let report = state.apply(&mut p, &grads, None);
        assert!(report.applied);
        assert_eq!(before, p.flatten());
        let (m, v) = state.moments();
        assert!(m.iter().all(|(w, b)| w.iter().all(|x| *x == 0.0) && b.iter().all(|x| *x == 0.0)));
        assert!(v.iter().all(|(w, b)| w.iter().all(|x| *x == 0.0) && b.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // Scalar param 0, g = 1, lr = 0.1, fresh state: m_hat = v_hat = 1, so
        // the update is -0.1 / (1 + eps).
        let mut p = ParameterSet {
            layers: vec![Layer { w: array![[0.0]], b: array![0.0], act: Activation::Identity }],
        };
        let mut grads = ParamGrads::zeros_like(&p);
        grads.layers[0].0[[0, 0]] = 1.0;
        let mut state = AdamState::new(&p, 0.1);
        state.apply(&mut p, &grads, None);
        assert!((p.layers[0].w[[0, 0]] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_skips_nonfinite_gradients() {
        let mut rng = SeededRng::named(37, "adam-nan");
        let mut p = ParameterSet::mlp(2, 4, 1, 1, Activation::Gelu, &mut rng);
        let before = p.flatten();
        let mut state = AdamState::new(&p, 0.1);
        let mut grads = ParamGrads::zeros_like(&p);
        grads.layers[0].0[[0, 0]] = f64::NAN;
        let report = state.apply(&mut p, &grads, Some(1.0));
        assert!(!report.applied);
        assert_eq!(state.step, 0);
        assert_eq!(before, p.flatten());
    }

    #[test]
    fn ema_extremes_and_paper_rate() {
        let mut rng = SeededRng::named(41, "ema");
        let online = ParameterSet::mlp(2, 4, 1, 1, Activation::Gelu, &mut rng);

        let mut full = EmaTracker::new(&ParameterSet::mlp(2, 4, 1, 1, Activation::Gelu, &mut rng), 1.0);
        full.update(&online);
        assert_eq!(full.target.flatten(), online.flatten());

        let frozen_init = ParameterSet::mlp(2, 4, 1, 1, Activation::Gelu, &mut rng);
        let mut frozen = EmaTracker::new(&frozen_init, 0.0);
        frozen.update(&online);
        assert_eq!(frozen.target.flatten(), frozen_init.flatten());

        // target 0, online 1, lambda = 0.005 -> 0.005
        let zeros = ParameterSet {
            layers: vec![Layer { w: array![[0.0]], b: array![0.0], act: Activation::Identity }],
        };
        let ones = ParameterSet {
            layers: vec![Layer { w: array![[1.0]], b: array![1.0], act: Activation::Identity }],
        };
        let mut t = EmaTracker::new(&zeros, 0.005);
        t.update(&ones);
        assert!((t.target.layers[0].w[[0, 0]] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn tape_gradient_of_constant_function_is_zero() {
        let mut rng = SeededRng::named(43, "const-grad");
        let p = ParameterSet::mlp(2, 4, 1, 2, Activation::Gelu, &mut rng);
        let mut tape = Tape::new();
        let h = tape.register(&p, true);
        let x = tape.input(rng.normal_mat(3, 2));
        let y = tape.mlp(&h, x);
        // loss ignores y entirely
        let c = tape.constant(Array2::from_elem((1, 1), 2.5));
        let loss = tape.mean_all(c);
        let _ = y;
        let grads = tape.backward_scalar(loss).unwrap();
        let pg = grads.of_mlp(&h, &p);
        assert!(pg.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::named(47, "ckpt");
        let p = ParameterSet::mlp(3, 8, 2, 2, Activation::Gelu, &mut rng);
        let path = dir.path().join("net.qnet");
        checkpoint::save_params(&path, &p).unwrap();
        let q = checkpoint::load_params(&path).unwrap();
        let pf = p.flatten();
        let qf = q.flatten();
        assert_eq!(pf.len(), qf.len());
        for (a, b) in pf.iter().zip(qf.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(q.layers[0].act, Activation::Gelu);

        let mut state = AdamState::new(&p, 3e-4);
        let mut grads = ParamGrads::zeros_like(&p);
        grads.layers[0].0[[0, 0]] = 0.7;
        let mut pc = p.clone();
        state.apply(&mut pc, &grads, None);
        let apath = dir.path().join("net.adam");
        checkpoint::save_adam(&apath, &state, &p).unwrap();
        let restored = checkpoint::load_adam(&apath, &p).unwrap();
        assert_eq!(restored.step, 1);
        let (m, _) = restored.moments();
        let (m0, _) = state.moments();
        assert_eq!(m[0].0[[0, 0]].to_bits(), m0[0].0[[0, 0]].to_bits());
    }
}
