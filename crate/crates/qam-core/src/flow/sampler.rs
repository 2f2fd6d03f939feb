use ndarray::Array2;

use crate::error::{QamError, Result};
use crate::flow::field::Velocity;
use crate::flow::{NoiseSchedule, TimeGrid};
use crate::nn::SeededRng;

/// A batch of discrete memory-less SDE paths with everything needed for a
/// bitwise replay: the conditioning states, the per-node action iterates, and
/// the drawn noises.
///
/// `states[i]` holds the actions at `t_{i+1}` (so `states[0]` is the initial
/// draw at `t_1 = h` and `states[T-1]` is the terminal `a_1`); `noises[0]` is
/// the initial draw and `noises[k]` the noise used by the update applied at
/// `t_k`.
#[derive(Debug, Clone)]
pub struct SdeTrajectory {
    pub grid: TimeGrid,
    pub s: Array2<f64>,
    pub states: Vec<Array2<f64>>,
    pub noises: Vec<Array2<f64>>,
    pub valid: Vec<bool>,
}

impl SdeTrajectory {
    pub fn batch(&self) -> usize {
        self.s.nrows()
    }

    /// Terminal actions `a_1` (never clipped).
    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().expect("at least one state")
    }

    /// Action iterate at interior node `t_k`, `k in 1..=T-1`.
    pub fn state_at_node(&self, k: usize) -> &Array2<f64> {
        &self.states[k - 1]
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn all_invalid(&self) -> bool {
        self.valid.iter().all(|v| !*v)
    }
}

fn sde_step(
    field: &impl Velocity,
    s: &Array2<f64>,
    a: &Array2<f64>,
    t: f64,
    h: f64,
    z: &Array2<f64>,
) -> Array2<f64> {
    let schedule = NoiseSchedule;
    let drift = field.velocity(s, a, t);
    let mut next = a * (1.0 - h / t);
    next.scaled_add(2.0 * h, &drift);
    next.scaled_add((h).sqrt() * schedule.sigma(t), z);
    next
}

/// Samples the discrete memory-less SDE
/// `a_{t+h} = a_t + h (2 f(s, a_t, t) - a_t / t) + sqrt(2 h (1-t)/t) z_t`
/// on the grid's interior nodes, starting from `a_{t_1} ~ N(0, I)`.
/// No intermediate or terminal clipping. Rows that turn non-finite are
/// flagged invalid instead of aborting the batch.
pub fn sde_sample(
    field: &impl Velocity,
    s: &Array2<f64>,
    grid: TimeGrid,
    rng: &mut SeededRng,
) -> SdeTrajectory {
    let batch = s.nrows();
    let dim = field.action_dim();
    let t_count = grid.steps();
    let h = grid.h();

    let mut states = Vec::with_capacity(t_count);
    let mut noises = Vec::with_capacity(t_count);

    let init = rng.normal_mat(batch, dim);
    noises.push(init.clone());
    states.push(init.clone());

    let mut a = init;
    for k in 1..t_count {
        let t = k as f64 * h;
        let z = rng.normal_mat(batch, dim);
        a = sde_step(field, s, &a, t, h, &z);
        states.push(a.clone());
        noises.push(z);
    }

    let mut valid = vec![true; batch];
    for st in &states {
        for (i, row) in st.rows().into_iter().enumerate() {
            if valid[i] && !row.iter().all(|v| v.is_finite()) {
                valid[i] = false;
            }
        }
    }

    SdeTrajectory { grid, s: s.clone(), states, noises, valid }
}

/// Re-runs the SDE updates from stored noises; bitwise-identical to the
/// original pass.
pub fn sde_replay(field: &impl Velocity, traj: &SdeTrajectory) -> Vec<Array2<f64>> {
    let h = traj.grid.h();
    let mut states = Vec::with_capacity(traj.states.len());
    let mut a = traj.noises[0].clone();
    states.push(a.clone());
    for k in 1..traj.grid.steps() {
        let t = k as f64 * h;
        a = sde_step(field, &traj.s, &a, t, h, &traj.noises[k]);
        states.push(a.clone());
    }
    states
}

/// Euler integration of the probability-flow ODE from `a^0 = z0` over `steps`
/// equal steps starting at t = 0, with a terminal elementwise clip to [-1, 1].
pub fn ode_sample(
    field: &impl Velocity,
    s: &Array2<f64>,
    z0: &Array2<f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(QamError::config("ode_sample needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut a = z0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let drift = field.velocity(s, &a, t);
        a.scaled_add(h, &drift);
    }
    a.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(a)
}

/// [`ode_sample`] without the terminal clip, for moment measurements where
/// the box would bias the statistics.
pub fn ode_sample_unclipped(
    field: &impl Velocity,
    s: &Array2<f64>,
    z0: &Array2<f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(QamError::config("ode_sample needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let mut a = z0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let drift = field.velocity(s, &a, t);
        a.scaled_add(h, &drift);
    }
    Ok(a)
}
