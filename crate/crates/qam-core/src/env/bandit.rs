use ndarray::Array1;

use crate::env::{Env, StepOut};
use crate::error::{QamError, Result};
use crate::nn::SeededRng;

/// One-step bandit with Gaussian behavior `N(mu, diag(var))` and quadratic
/// reward `Q*(a) = b . a - a . diag(c) a / 2`. The single state is `(0)`; the
/// tilted-Gaussian oracle gives the optimal behavior-constrained policy in
/// closed form. Actions are unbounded: the behavior draws and the tilt
/// targets both leave the unit box.
#[derive(Debug, Clone)]
pub struct GaussTiltBandit {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
}

impl GaussTiltBandit {
    pub fn new(mu: Array1<f64>, var: Array1<f64>, b: Array1<f64>, c: Array1<f64>) -> Result<Self> {
        let d = mu.len();
        if var.len() != d || b.len() != d || c.len() != d {
            return Err(QamError::config("bandit parameter dimensions disagree"));
        }
        if var.iter().any(|v| *v <= 0.0) {
            return Err(QamError::config("behavior variances must be positive"));
        }
        if c.iter().any(|v| *v < 0.0) {
            return Err(QamError::config("reward curvature must be >= 0"));
        }
        Ok(GaussTiltBandit { mu, var, b, c })
    }

    pub fn linear(dim: usize, b: Array1<f64>) -> Self {
        GaussTiltBandit {
            mu: Array1::zeros(dim),
            var: Array1::from_elem(dim, 1.0),
            c: Array1::zeros(dim),
            b,
        }
    }

    pub fn reward(&self, a: &Array1<f64>) -> f64 {
        let mut r = 0.0;
        for i in 0..a.len() {
            r += self.b[i] * a[i] - 0.5 * self.c[i] * a[i] * a[i];
        }
        r
    }
}

impl Env for GaussTiltBandit {
    fn name(&self) -> &'static str {
        "gauss-bandit"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        self.mu.len()
    }
    fn bounded_actions(&self) -> bool {
        false
    }
    fn reset(&mut self, _rng: &mut SeededRng) -> Array1<f64> {
        Array1::zeros(1)
    }
    fn step(&mut self, action: &Array1<f64>) -> StepOut {
        StepOut { next: Array1::zeros(1), reward: self.reward(action), done: true }
    }
    fn clip_warnings(&self) -> u64 {
        0
    }
}

/// One-step bandit whose behavior is an even mixture of two well-separated
/// Gaussian modes; the reward is a bump centered on the second mode.
#[derive(Debug, Clone)]
pub struct BimodalBandit {
    pub mode1: Array1<f64>,
    pub mode2: Array1<f64>,
    pub std: f64,
    pub reward_width: f64,
}

impl BimodalBandit {
    pub fn standard(dim: usize) -> Self {
        // Modes at ±(0.5, ...): separation 1.0 per axis with std 0.08 keeps
        // them more than six standard deviations apart.
        BimodalBandit {
            mode1: Array1::from_elem(dim, -0.5),
            mode2: Array1::from_elem(dim, 0.5),
            std: 0.08,
            reward_width: 0.3,
        }
    }

    pub fn reward(&self, a: &Array1<f64>) -> f64 {
        let d2: f64 = a
            .iter()
            .zip(self.mode2.iter())
            .map(|(x, m)| (x - m) * (x - m))
            .sum();
        (-d2 / (2.0 * self.reward_width * self.reward_width)).exp()
    }
}

impl Env for BimodalBandit {
    fn name(&self) -> &'static str {
        "bimodal-bandit"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        self.mode1.len()
    }
    fn bounded_actions(&self) -> bool {
        false
    }
    fn reset(&mut self, _rng: &mut SeededRng) -> Array1<f64> {
        Array1::zeros(1)
    }
    fn step(&mut self, action: &Array1<f64>) -> StepOut {
        StepOut { next: Array1::zeros(1), reward: self.reward(action), done: true }
    }
    fn clip_warnings(&self) -> u64 {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bandit_reward_is_the_quadratic_form() {
        let env = GaussTiltBandit::new(
            array![0.0, 0.0],
            array![1.0, 1.0],
            array![1.0, -2.0],
            array![0.5, 0.0],
        )
        .unwrap();
        let a = array![2.0, 1.0];
        // b.a = 2 - 2 = 0; curvature: 0.5 * 0.5 * 4 = 1
        assert!((env.reward(&a) + 1.0).abs() < 1e-15);
        let mut env = env;
        let out = env.step(&a);
        assert!(out.done);
        assert_eq!(out.reward, env.reward(&a));
    }

    #[test]
    fn bimodal_modes_are_well_separated() {
        let env = BimodalBandit::standard(2);
        let gap: f64 = env
            .mode1
            .iter()
            .zip(env.mode2.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap >= 6.0 * env.std);
        assert!((env.reward(&env.mode2.clone()) - 1.0).abs() < 1e-12);
        assert!(env.reward(&env.mode1.clone()) < 0.01);
    }
}
