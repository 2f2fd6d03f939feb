use ndarray::{Array1, Array2};

use crate::nn::mlp::{ParamGrads, ParameterSet};

/// Adam moments mirroring a [`ParameterSet`], with bias correction and
/// optional global-norm gradient clipping applied before the moment update.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// What a single optimizer step did.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// False when non-finite gradients forced a skip.
    pub applied: bool,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let zeros = |p: &ParameterSet| -> Vec<(Array2<f64>, Array1<f64>)> {
            p.layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update. If `max_global_norm` is set and the gradient norm
    /// exceeds it, gradients are rescaled to that norm first. Non-finite
    /// gradients skip the step entirely (moments and counter untouched).
    pub fn apply(
        &mut self,
        params: &mut ParameterSet,
        grads: &ParamGrads,
        max_global_norm: Option<f64>,
    ) -> StepReport {
        let norm = grads.global_norm();
        if !norm.is_finite() || !grads.is_finite() {
            return StepReport { applied: false, grad_norm: norm };
        }
        let scale = match max_global_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for (i, layer) in params.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];

            ndarray::Zip::from(&mut layer.w)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
            ndarray::Zip::from(&mut layer.b)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        StepReport { applied: true, grad_norm: norm }
    }

    pub fn moments(&self) -> (&[(Array2<f64>, Array1<f64>)], &[(Array2<f64>, Array1<f64>)]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(
        &mut self,
    ) -> (
        &mut Vec<(Array2<f64>, Array1<f64>)>,
        &mut Vec<(Array2<f64>, Array1<f64>)>,
    ) {
        (&mut self.m, &mut self.v)
    }
}

/// Adam on a single scalar (the edit policy's log η).
#[derive(Debug, Clone, Copy)]
pub struct ScalarAdam {
    m: f64,
    v: f64,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        ScalarAdam { m: 0.0, v: 0.0, step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn apply(&mut self, value: &mut f64, grad: f64) -> bool {
        if !grad.is_finite() {
            return false;
        }
        self.step += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.step as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.step as i32));
        *value -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        true
    }
}
