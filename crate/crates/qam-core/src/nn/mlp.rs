use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{QamError, Result};
use crate::nn::rng::SeededRng;

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation input.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `y = act(x W^T + b)` with `w: [out, in]`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Dense parameters of a small multilayer perceptron.
///
/// Consecutive layer shapes must compose and every entry must stay finite;
/// both are checked by [`ParameterSet::validate`].
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub layers: Vec<Layer>,
}

/// Gradients (or any other tensors) shaped like a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Per-layer pre-activation cache from [`ParameterSet::forward_cached`],
/// sufficient for one input-VJP sweep.
pub struct ForwardCache {
    input: Array2<f64>,
    // (pre-activation z, post-activation y) per layer
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ParameterSet {
    /// Builds an MLP `input -> width x depth (hidden_act) -> output (identity)`.
    ///
    /// Weights and biases are drawn from U(±1/sqrt(fan_in)).
    pub fn mlp(
        input: usize,
        width: usize,
        depth: usize,
        output: usize,
        hidden_act: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let mut dims = Vec::with_capacity(depth + 2);
        dims.push(input);
        for _ in 0..depth {
            dims.push(width);
        }
        dims.push(output);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = rng.uniform_mat(fan_out, fan_in, -bound, bound);
            let b = rng.uniform_vec(fan_out, -bound, bound);
            let act = if i + 1 == dims.len() - 1 {
                Activation::Identity
            } else {
                hidden_act
            };
            layers.push(Layer { w, b, act });
        }
        ParameterSet { layers }
    }

    /// An MLP whose final layer is zero, so it outputs exactly zero everywhere
    /// while earlier layers still provide nonzero features for the final
    /// layer's gradient.
    pub fn mlp_zero_output(
        input: usize,
        width: usize,
        depth: usize,
        output: usize,
        hidden_act: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let mut p = Self::mlp(input, width, depth, output, hidden_act, rng);
        if let Some(last) = p.layers.last_mut() {
            last.w.fill(0.0);
            last.b.fill(0.0);
        }
        p
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let p = ParameterSet { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(QamError::config("parameter set has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(QamError::config(format!(
                    "layer {} output {} does not match layer {} input {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.b.len() != l.out_dim() {
                return Err(QamError::config(format!(
                    "layer {} bias length {} does not match rows {}",
                    i,
                    l.b.len(),
                    l.out_dim()
                )));
            }
            if !l.w.iter().all(|v| v.is_finite()) || !l.b.iter().all(|v| v.is_finite()) {
                return Err(QamError::domain(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    /// Batched forward pass without recording: `x: [B, in] -> [B, out]`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            z.mapv_inplace(|v| layer.act.apply(v));
            h = z;
        }
        h
    }

    /// Forward pass caching pre-activations for a later input VJP.
    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            pre.push(z.clone());
            z.mapv_inplace(|v| layer.act.apply(v));
            post.push(z.clone());
            h = z;
        }
        (
            h,
            ForwardCache {
                input: x.clone(),
                pre,
                post,
            },
        )
    }

    /// Input-only VJP: returns `J_x^T c` per batch row. Parameters are treated
    /// as constants; use the tape when parameter gradients are needed.
    pub fn vjp_input(&self, cache: &ForwardCache, cotangent: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(cache.pre.len(), self.layers.len());
        let mut delta = cotangent.clone();
        for (layer, pre) in self.layers.iter().zip(cache.pre.iter()).rev() {
            // delta through the activation
            ndarray::Zip::from(&mut delta)
                .and(pre)
                .for_each(|d, &z| *d *= layer.act.derivative(z));
            // delta through the affine map
            delta = delta.dot(&layer.w);
        }
        delta
    }

    /// Deepest hidden activation for the cached pass, used by tests that
    /// need a feature map independent of the output layer.
    pub fn last_hidden<'a>(&self, cache: &'a ForwardCache) -> Option<&'a Array2<f64>> {
        if self.layers.len() >= 2 {
            cache.post.get(self.layers.len() - 2)
        } else {
            Some(&cache.input)
        }
    }

    /// Flattens all parameters into one vector (manifest order: per layer W
    /// row-major then b).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
        out
    }

    /// Inverse of [`ParameterSet::flatten`] against this set's shapes.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(QamError::config(format!(
                "flat length {} does not match parameter count {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| {
                w.iter().map(|v| v * v).sum::<f64>() + b.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * k);
            b.mapv_inplace(|v| v * k);
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(other.layers.iter()) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

/// Stacks batch rows `[B, n]` from a slice of vectors.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let b = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((b, n));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

/// Column-broadcasts a scalar into `[B, 1]`.
pub fn column(values: &Array1<f64>) -> Array2<f64> {
    values.clone().insert_axis(Axis(1))
}
