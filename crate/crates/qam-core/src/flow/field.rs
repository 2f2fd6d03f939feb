use ndarray::{concatenate, Array1, Array2, Axis};

use crate::nn::{ParameterSet, SeededRng};

/// Which role a state-conditioned field plays in an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    BehaviorBeta,
    FinetunedTheta,
}

/// A state-conditioned velocity: `(s, a, t) -> action-space drift`.
///
/// Samplers and adjoint recursions call this with one shared `t` per step and
/// batched rows for `s` and `a`.
pub trait Velocity {
    fn action_dim(&self) -> usize;
    fn velocity(&self, s: &Array2<f64>, a: &Array2<f64>, t: f64) -> Array2<f64>;
}

/// A velocity with an action-input VJP `J_a^T c`, row per sample.
pub trait VelocityVjp: Velocity {
    fn action_vjp(&self, s: &Array2<f64>, a: &Array2<f64>, t: f64, cot: &Array2<f64>)
        -> Array2<f64>;
}

impl<T: Velocity + ?Sized> Velocity for &T {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn velocity(&self, s: &Array2<f64>, a: &Array2<f64>, t: f64) -> Array2<f64> {
        (**self).velocity(s, a, t)
    }
}

impl<T: VelocityVjp + ?Sized> VelocityVjp for &T {
    fn action_vjp(
        &self,
        s: &Array2<f64>,
        a: &Array2<f64>,
        t: f64,
        cot: &Array2<f64>,
    ) -> Array2<f64> {
        (**self).action_vjp(s, a, t, cot)
    }
}

/// MLP-backed velocity field over the raw concatenation `[s | a | t]`.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub params: ParameterSet,
    pub role: FieldRole,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl VelocityField {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        width: usize,
        depth: usize,
        role: FieldRole,
        rng: &mut SeededRng,
    ) -> Self {
        let params = ParameterSet::mlp(
            state_dim + action_dim + 1,
            width,
            depth,
            action_dim,
            crate::nn::Activation::Gelu,
            rng,
        );
        VelocityField { params, role, state_dim, action_dim }
    }

    pub fn from_params(params: ParameterSet, state_dim: usize, action_dim: usize, role: FieldRole) -> Self {
        debug_assert_eq!(params.in_dim(), state_dim + action_dim + 1);
        debug_assert_eq!(params.out_dim(), action_dim);
        VelocityField { params, role, state_dim, action_dim }
    }

    /// Network input rows `[s | a | t]` with a shared time column.
    pub fn stack_input(s: &Array2<f64>, a: &Array2<f64>, t: f64) -> Array2<f64> {
        let t_col = Array2::from_elem((s.nrows(), 1), t);
        concatenate(Axis(1), &[s.view(), a.view(), t_col.view()])
            .expect("rows of s, a, t agree")
    }

    /// Like [`VelocityField::stack_input`] but with one `t` per row.
    pub fn stack_input_rows(s: &Array2<f64>, a: &Array2<f64>, t: &Array1<f64>) -> Array2<f64> {
        let t_col = t.clone().insert_axis(Axis(1));
        concatenate(Axis(1), &[s.view(), a.view(), t_col.view()])
            .expect("rows of s, a, t agree")
    }
}

impl Velocity for VelocityField {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity(&self, s: &Array2<f64>, a: &Array2<f64>, t: f64) -> Array2<f64> {
        self.params.forward_batch(&Self::stack_input(s, a, t))
    }
}

impl VelocityVjp for VelocityField {
    fn action_vjp(
        &self,
        s: &Array2<f64>,
        a: &Array2<f64>,
        t: f64,
        cot: &Array2<f64>,
    ) -> Array2<f64> {
        let x = Self::stack_input(s, a, t);
        let (_, cache) = self.params.forward_cached(&x);
        let full = self.params.vjp_input(&cache, cot);
        full.slice(ndarray::s![.., self.state_dim..self.state_dim + self.action_dim])
            .to_owned()
    }
}

/// Closed-form optimal field for data `N(mean, diag(std^2))` under the linear
/// interpolant: per coordinate
/// `f(x, t) = m + k(t) (x - t m)` with
/// `k(t) = (t s^2 - (1 - t)) / ((1 - t)^2 + t^2 s^2)`.
#[derive(Debug, Clone)]
pub struct GaussianFlowField {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl GaussianFlowField {
    pub fn new(mean: Array1<f64>, std: Array1<f64>) -> Self {
        debug_assert_eq!(mean.len(), std.len());
        GaussianFlowField { mean, std }
    }

    #[inline]
    pub fn gain(&self, coord: usize, t: f64) -> f64 {
        let s2 = self.std[coord] * self.std[coord];
        let c2 = (1.0 - t) * (1.0 - t) + t * t * s2;
        (t * s2 - (1.0 - t)) / c2
    }
}

impl Velocity for GaussianFlowField {
    fn action_dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, s: &Array2<f64>, a: &Array2<f64>, t: f64) -> Array2<f64> {
        let _ = s;
        let mut out = a.clone();
        for j in 0..self.mean.len() {
            let k = self.gain(j, t);
            let m = self.mean[j];
            out.column_mut(j).mapv_inplace(|x| m + k * (x - t * m));
        }
        out
    }
}

impl VelocityVjp for GaussianFlowField {
    fn action_vjp(
        &self,
        _s: &Array2<f64>,
        _a: &Array2<f64>,
        t: f64,
        cot: &Array2<f64>,
    ) -> Array2<f64> {
        let mut out = cot.clone();
        for j in 0..self.mean.len() {
            let k = self.gain(j, t);
            out.column_mut(j).mapv_inplace(|c| c * k);
        }
        out
    }
}

/// State- and time-independent constant drift (test scaffolding).
#[derive(Debug, Clone)]
pub struct ConstField(pub Array1<f64>);

impl Velocity for ConstField {
    fn action_dim(&self) -> usize {
        self.0.len()
    }
    fn velocity(&self, s: &Array2<f64>, _a: &Array2<f64>, _t: f64) -> Array2<f64> {
        let mut out = Array2::zeros((s.nrows(), self.0.len()));
        out += &self.0;
        out
    }
}

impl VelocityVjp for ConstField {
    fn action_vjp(
        &self,
        s: &Array2<f64>,
        _a: &Array2<f64>,
        _t: f64,
        _cot: &Array2<f64>,
    ) -> Array2<f64> {
        Array2::zeros((s.nrows(), self.0.len()))
    }
}

/// Time-independent linear drift `f(a) = M a` (closed-form adjoint oracle).
#[derive(Debug, Clone)]
pub struct LinearField(pub Array2<f64>);

impl Velocity for LinearField {
    fn action_dim(&self) -> usize {
        self.0.nrows()
    }
    fn velocity(&self, _s: &Array2<f64>, a: &Array2<f64>, _t: f64) -> Array2<f64> {
        a.dot(&self.0.t())
    }
}

impl VelocityVjp for LinearField {
    fn action_vjp(
        &self,
        _s: &Array2<f64>,
        _a: &Array2<f64>,
        _t: f64,
        cot: &Array2<f64>,
    ) -> Array2<f64> {
        cot.dot(&self.0)
    }
}

/// Pointwise sum of two drifts (analytic base plus a trainable perturbation,
/// classifier guidance, ...).
pub struct SumField<A, B>(pub A, pub B);

impl<A: Velocity, B: Velocity> Velocity for SumField<A, B> {
    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }
    fn velocity(&self, s: &Array2<f64>, a: &Array2<f64>, t: f64) -> Array2<f64> {
        self.0.velocity(s, a, t) + self.1.velocity(s, a, t)
    }
}

impl<A: VelocityVjp, B: VelocityVjp> VelocityVjp for SumField<A, B> {
    fn action_vjp(
        &self,
        s: &Array2<f64>,
        a: &Array2<f64>,
        t: f64,
        cot: &Array2<f64>,
    ) -> Array2<f64> {
        self.0.action_vjp(s, a, t, cot) + self.1.action_vjp(s, a, t, cot)
    }
}
