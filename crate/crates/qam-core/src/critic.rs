//! Q-ensemble with EMA targets, pessimistic TD backup, and action-gradient
//! queries.

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{QamError, Result};
use crate::nn::{Activation, EmaTracker, ParamGrads, ParameterSet, SeededRng, Tape};

/// How the ensemble spread in the pessimistic backup is computed.
///
/// The backup formula's spread term is printed as the square root of the
/// *sum* of squared deviations, without a 1/K or 1/(K-1); that literal form
/// is the default, with conventional sample std behind a switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdMode {
    RootSumSquares,
    Sample,
}

/// K critics over `(s, a)` with EMA target copies.
#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    pub members: Vec<ParameterSet>,
    pub targets: Vec<EmaTracker>,
    pub rho: f64,
    pub std_mode: StdMode,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl CriticEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        width: usize,
        depth: usize,
        k: usize,
        rho: f64,
        ema_rate: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(QamError::config("critic ensemble needs K >= 1"));
        }
        if rho < 0.0 {
            return Err(QamError::config("pessimism coefficient rho must be >= 0"));
        }
        let mut members = Vec::with_capacity(k);
        let mut targets = Vec::with_capacity(k);
        for _ in 0..k {
            let net = ParameterSet::mlp(state_dim + action_dim, width, depth, 1, Activation::Gelu, rng);
            targets.push(EmaTracker::new(&net, ema_rate));
            members.push(net);
        }
        Ok(CriticEnsemble {
            members,
            targets,
            rho,
            std_mode: StdMode::RootSumSquares,
            state_dim,
            action_dim,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn stack(s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[s.view(), a.view()]).expect("rows of s and a agree")
    }

    fn nets(&self, use_targets: bool) -> Vec<&ParameterSet> {
        if use_targets {
            self.targets.iter().map(|t| &t.target).collect()
        } else {
            self.members.iter().collect()
        }
    }

    /// Per-member Q values: `[B, K]`.
    pub fn member_values(&self, s: &Array2<f64>, a: &Array2<f64>, use_targets: bool) -> Array2<f64> {
        let x = Self::stack(s, a);
        let mut out = Array2::zeros((s.nrows(), self.k()));
        for (j, net) in self.nets(use_targets).into_iter().enumerate() {
            let q = net.forward_batch(&x);
            out.column_mut(j).assign(&q.column(0));
        }
        out
    }

    /// Ensemble-mean Q values.
    pub fn mean_value(&self, s: &Array2<f64>, a: &Array2<f64>, use_targets: bool) -> Array1<f64> {
        self.member_values(s, a, use_targets).mean_axis(Axis(1)).expect("K >= 1")
    }

    fn spread(&self, values: &Array2<f64>) -> Array1<f64> {
        let k = self.k();
        let mean = values.mean_axis(Axis(1)).expect("K >= 1");
        let mut out = Array1::zeros(values.nrows());
        for i in 0..values.nrows() {
            let mut ss = 0.0;
            for j in 0..k {
                let d = values[[i, j]] - mean[i];
                ss += d * d;
            }
            out[i] = match self.std_mode {
                StdMode::RootSumSquares => ss.sqrt(),
                StdMode::Sample => {
                    if k > 1 {
                        (ss / (k - 1) as f64).sqrt()
                    } else {
                        0.0
                    }
                }
            };
        }
        out
    }

    /// Pessimistic TD target
    /// `r + (1 - done) * gamma * (Qbar_mean(s', a') - rho * Qbar_std(s', a'))`
    /// over the target ensemble.
    pub fn pessimistic_target(
        &self,
        s_next: &Array2<f64>,
        a_next: &Array2<f64>,
        r: &Array1<f64>,
        done: &Array1<f64>,
        gamma: f64,
    ) -> Array1<f64> {
        let values = self.member_values(s_next, a_next, true);
        let mean = values.mean_axis(Axis(1)).expect("K >= 1");
        let spread = self.spread(&values);
        let mut out = Array1::zeros(r.len());
        for i in 0..r.len() {
            out[i] = r[i] + (1.0 - done[i]) * gamma * (mean[i] - self.rho * spread[i]);
        }
        out
    }

    /// Mean squared TD error over the batch and all members, with per-member
    /// parameter gradients. Targets are constants.
    pub fn td_loss(
        &self,
        s: &Array2<f64>,
        a: &Array2<f64>,
        targets: &Array1<f64>,
    ) -> Result<(f64, Vec<ParamGrads>)> {
        let batch = s.nrows();
        if batch == 0 {
            return Err(QamError::usage("td_loss on an empty batch"));
        }
        let x_val = Self::stack(s, a);
        let y_val = targets.clone().insert_axis(Axis(1));

        let mut tape = Tape::new();
        let x = tape.constant(x_val);
        let y = tape.constant(y_val);
        let mut handles = Vec::with_capacity(self.k());
        let mut total = None;
        for member in &self.members {
            let h = tape.register(member, true);
            let q = tape.mlp(&h, x);
            let resid = tape.sub(q, y);
            let sq = tape.square(resid);
            let sum = tape.sum_all(sq);
            total = Some(match total {
                None => sum,
                Some(acc) => tape.add(acc, sum),
            });
            handles.push(h);
        }
        let total = total.expect("K >= 1");
        let loss = tape.scale(total, 1.0 / (batch * self.k()) as f64);
        let value = tape.scalar(loss);
        let grads = tape.backward_scalar(loss)?;
        let mut per_member = Vec::with_capacity(self.k());
        for (h, member) in handles.iter().zip(self.members.iter()) {
            per_member.push(grads.of_mlp(h, member));
        }
        Ok((value, per_member))
    }

    /// Ensemble-mean Q and its action gradient, one VJP per member.
    pub fn q_mean_and_action_grad(
        &self,
        s: &Array2<f64>,
        a: &Array2<f64>,
        use_targets: bool,
    ) -> (Array1<f64>, Array2<f64>) {
        let x = Self::stack(s, a);
        let k = self.k() as f64;
        let cot = Array2::from_elem((s.nrows(), 1), 1.0 / k);
        let mut q_sum = Array1::zeros(s.nrows());
        let mut grad = Array2::zeros((s.nrows(), self.action_dim));
        for net in self.nets(use_targets) {
            let (q, cache) = net.forward_cached(&x);
            q_sum += &q.column(0);
            let full = net.vjp_input(&cache, &cot);
            grad += &full.slice(ndarray::s![.., self.state_dim..self.state_dim + self.action_dim]);
        }
        (q_sum / k, grad)
    }

    /// EMA update of every target copy toward its online member.
    pub fn update_targets(&mut self) {
        for (tracker, online) in self.targets.iter_mut().zip(self.members.iter()) {
            tracker.update(online);
        }
    }
}
