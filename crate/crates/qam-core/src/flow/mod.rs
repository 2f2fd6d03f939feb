//! State-conditioned flow-matching policies: the training loss, the
//! deterministic ODE action sampler, and the memory-less SDE sampler that
//! feeds the adjoint recursions.

pub mod field;
pub mod fm;
pub mod sampler;

pub use field::{
    ConstField, FieldRole, GaussianFlowField, LinearField, SumField, Velocity, VelocityField,
    VelocityVjp,
};
pub use fm::{fm_loss, fm_loss_value};
pub use sampler::{ode_sample, ode_sample_unclipped, sde_replay, sde_sample, SdeTrajectory};

use crate::error::{QamError, Result};

/// Uniform time grid with step `h = 1/T`; interior nodes `t_k = k h` for
/// `k = 1..T-1`. The `t = 0` node is excluded: the memory-less drift divides
/// by `t` and the update applied at `t = h` already wipes the initial state,
/// so paths start at `t_1 = h` with `a_{t_1} ~ N(0, I)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(QamError::config(format!("time grid needs T >= 2, got {steps}")));
        }
        Ok(TimeGrid { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Interior nodes `t_1 .. t_{T-1}`, strictly increasing, last one `1 - h`.
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.h();
        (1..self.steps).map(move |k| k as f64 * h)
    }

    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k >= 1 && k < self.steps);
        k as f64 * self.h()
    }

    pub fn node_count(&self) -> usize {
        self.steps - 1
    }
}

/// The memory-less noise schedule `sigma(t) = sqrt(2 (1 - t) / t)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        (2.0 * (1.0 - t) / t).sqrt()
    }

    #[inline]
    pub fn sigma_sq(&self, t: f64) -> f64 {
        2.0 * (1.0 - t) / t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SeededRng;
    use ndarray::{array, Array1, Array2};

    #[test]
    fn grid_invariants() {
        assert!(TimeGrid::new(1).is_err());
        let g = TimeGrid::new(10).unwrap();
        assert_eq!(g.h() * g.steps() as f64, 1.0);
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes.len(), 9);
        assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        assert!((nodes.last().unwrap() - (1.0 - g.h())).abs() < 1e-15);
        assert!((nodes[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sigma_at_half_is_sqrt_two() {
        let s = NoiseSchedule;
        assert!((s.sigma(0.5) - 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.sigma(1.0), 0.0);
        assert!(s.sigma(1e-9) > 1e4);
    }

    #[test]
    fn ode_with_zero_field_returns_clipped_noise() {
        let f = ConstField(Array1::zeros(2));
        let s = Array2::zeros((3, 1));
        let z0 = array![[0.5, -2.0], [1.5, 0.0], [-0.3, 0.9]];
        let out = ode_sample(&f, &s, &z0, 10).unwrap();
        assert_eq!(out, array![[0.5, -1.0], [1.0, 0.0], [-0.3, 0.9]]);
    }

    #[test]
    fn ode_with_constant_field_translates_by_c() {
        // h * T = 1, so a constant drift c moves z0 by exactly c.
        let f = ConstField(array![0.25, -0.5]);
        let s = Array2::zeros((1, 1));
        let z0 = array![[0.1, 0.2]];
        let out = ode_sample(&f, &s, &z0, 10).unwrap();
        assert!((out[[0, 0]] - 0.35).abs() < 1e-12);
        assert!((out[[0, 1]] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn first_sde_update_discards_the_initial_state() {
        // At t = h the update factor (1 - h/t) vanishes, so with f = 0 the
        // next state is sqrt(2 h (1-h)/h) z = sqrt(2 (1-h)) z.
        let f = ConstField(Array1::zeros(2));
        let s = Array2::zeros((4, 1));
        let grid = TimeGrid::new(10).unwrap();
        let mut rng = SeededRng::named(3, "sde-first");
        let traj = sde_sample(&f, &s, grid, &mut rng);
        let expect = traj.noises[1].mapv(|z| (2.0 * 0.9_f64).sqrt() * z);
        for (a, b) in traj.states[1].iter().zip(expect.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sde_replay_is_bitwise_identical() {
        let mut rng = SeededRng::named(9, "sde-replay");
        let field = VelocityField::new(1, 2, 16, 2, FieldRole::FinetunedTheta, &mut rng);
        let s = rng.normal_mat(8, 1);
        let grid = TimeGrid::new(10).unwrap();
        let traj = sde_sample(&field, &s, grid, &mut rng);
        let replayed = sde_replay(&field, &traj);
        assert_eq!(replayed.len(), traj.states.len());
        for (a, b) in replayed.iter().zip(traj.states.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(traj.invalid_count(), 0);
    }

    #[test]
    fn sde_flags_nonfinite_rows() {
        struct Exploder;
        impl Velocity for Exploder {
            fn action_dim(&self) -> usize {
                1
            }
            fn velocity(&self, s: &Array2<f64>, a: &Array2<f64>, _t: f64) -> Array2<f64> {
                // First row explodes, the rest stay tame.
                let mut v = Array2::zeros((s.nrows(), 1));
                v[[0, 0]] = f64::INFINITY * a[[0, 0]].signum();
                v
            }
        }
        let s = Array2::zeros((3, 1));
        let grid = TimeGrid::new(4).unwrap();
        let mut rng = SeededRng::named(4, "sde-blowup");
        let traj = sde_sample(&Exploder, &s, grid, &mut rng);
        assert_eq!(traj.invalid_count(), 1);
        assert!(!traj.valid[0]);
        assert!(traj.valid[1] && traj.valid[2]);
    }

    #[test]
    fn gaussian_field_boundary_values() {
        // k(1) = 1 so f(x, 1) = x; k(0) = -1 so f(x, 0) = m - x.
        let f = GaussianFlowField::new(array![0.3, -0.7], array![0.2, 1.5]);
        let s = Array2::zeros((1, 1));
        let x = array![[0.9, 0.4]];
        let at_one = f.velocity(&s, &x, 1.0);
        assert!((at_one[[0, 0]] - 0.9).abs() < 1e-12);
        assert!((at_one[[0, 1]] - 0.4).abs() < 1e-12);
        let at_zero = f.velocity(&s, &x, 0.0);
        assert!((at_zero[[0, 0]] - (0.3 - 0.9)).abs() < 1e-12);
        assert!((at_zero[[0, 1]] - (-0.7 - 0.4)).abs() < 1e-12);
    }

    /// Exact mean/variance recursions of the discrete samplers under the
    /// analytic Gaussian field; an independent oracle for the moment tests.
    pub(crate) fn discrete_sde_moments(mean: f64, std: f64, steps: usize) -> (f64, f64) {
        let h = 1.0 / steps as f64;
        let s2 = std * std;
        let gain = |t: f64| (t * s2 - (1.0 - t)) / ((1.0 - t) * (1.0 - t) + t * t * s2);
        let mut mu = 0.0;
        let mut var = 1.0;
        for k in 1..steps {
            let t = k as f64 * h;
            let kk = gain(t);
            let factor = 1.0 + 2.0 * h * kk - h / t;
            mu = factor * mu + 2.0 * h * mean * (1.0 - t * kk);
            var = factor * factor * var + 2.0 * h * (1.0 - t) / t;
        }
        (mu, var.sqrt())
    }

    #[test]
    fn sde_terminal_moments_match_exact_recursion() {
        let field = GaussianFlowField::new(array![0.3, 0.3], array![0.2, 0.2]);
        let s = Array2::zeros((20_000, 1));
        let grid = TimeGrid::new(10).unwrap();
        let mut rng = SeededRng::named(12, "sde-moments");
        let traj = sde_sample(&field, &s, grid, &mut rng);
        let term = traj.terminal();

        let (mu_exact, std_exact) = discrete_sde_moments(0.3, 0.2, 10);
        for j in 0..2 {
            let col = term.column(j);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!((mean - mu_exact).abs() < 0.01, "mean {mean} vs {mu_exact}");
            assert!((var.sqrt() - std_exact).abs() < 0.01, "std {} vs {std_exact}", var.sqrt());
        }
        // The discretization itself stays close to the continuous target.
        assert!((mu_exact - 0.3).abs() < 0.02);
        assert!((std_exact - 0.2).abs() < 0.03);
    }

    #[test]
    fn fm_loss_is_zero_for_the_exact_constant_residual() {
        // Reproduce the single (t, z) draw, then freeze the net to a - z.
        let mut probe = SeededRng::named(21, "fm-zero");
        let a_val = 0.6_f64;
        let t = probe.uniform_vec(1, 0.0, 1.0);
        let z = probe.normal_mat(1, 1);
        let _ = t;
        let target = a_val - z[[0, 0]];

        let params = ParameterSet {
            layers: vec![crate::nn::Layer {
                w: Array2::zeros((1, 3)),
                b: array![target],
                act: crate::nn::Activation::Identity,
            }],
        };
        let field = VelocityField::from_params(params, 1, 1, FieldRole::BehaviorBeta);
        let s = Array2::zeros((1, 1));
        let a = array![[a_val]];
        let mut rng = SeededRng::named(21, "fm-zero");
        let (loss, grads) = fm_loss(&field, &s, &a, None, &mut rng).unwrap();
        assert!(loss < 1e-28, "loss {loss}");
        assert!(grads.global_norm() < 1e-12);
    }

    #[test]
    fn fm_loss_of_zero_field_matches_gaussian_second_moment() {
        // f = 0: E ||a - z||^2 = ||a||^2 + A over z ~ N(0, I_A).
        let params = ParameterSet {
            layers: vec![crate::nn::Layer {
                w: Array2::zeros((2, 4)),
                b: Array1::zeros(2),
                act: crate::nn::Activation::Identity,
            }],
        };
        let field = VelocityField::from_params(params, 1, 2, FieldRole::BehaviorBeta);
        let n = 20_000;
        let s = Array2::zeros((n, 1));
        let mut a = Array2::zeros((n, 2));
        a.column_mut(0).fill(0.5);
        a.column_mut(1).fill(-0.5);
        let mut rng = SeededRng::named(22, "fm-second-moment");
        let loss = fm_loss_value(&field, &s, &a, &mut rng).unwrap();
        let expect = 0.5 + 2.0; // ||a||^2 + A
        assert!((loss - expect).abs() < 0.08, "loss {loss} vs {expect}");
    }

    #[test]
    fn fm_loss_rejects_empty_batches() {
        let mut rng = SeededRng::named(23, "fm-empty");
        let field = VelocityField::new(1, 1, 8, 1, FieldRole::BehaviorBeta, &mut rng);
        let s = Array2::zeros((0, 1));
        let a = Array2::zeros((0, 1));
        assert!(matches!(
            fm_loss(&field, &s, &a, None, &mut rng),
            Err(crate::QamError::Usage(_))
        ));
    }

    #[test]
    fn fm_gradients_match_finite_differences() {
        let mut rng = SeededRng::named(25, "fm-fd");
        let field = VelocityField::new(1, 2, 8, 1, FieldRole::BehaviorBeta, &mut rng);
        let s = rng.normal_mat(6, 1);
        let a = rng.normal_mat(6, 2);

        let mut loss_rng = SeededRng::named(77, "fm-fd-draws");
        let (_, grads) = fm_loss(&field, &s, &a, None, &mut loss_rng).unwrap();

        let fd = crate::nn::finite_difference_grads(&field.params, 1e-5, |p| {
            let probe = VelocityField::from_params(p.clone(), 1, 2, FieldRole::BehaviorBeta);
            let mut r = SeededRng::named(77, "fm-fd-draws");
            fm_loss_value(&probe, &s, &a, &mut r).unwrap()
        });
        for (g, f) in grads.flatten().iter().zip(fd.flatten().iter()) {
            assert!(crate::nn::close_rel(*g, *f, 1e-4, 1e-7), "{g} vs {f}");
        }
    }

    use crate::nn::ParameterSet;
}
