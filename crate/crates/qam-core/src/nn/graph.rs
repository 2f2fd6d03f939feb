use ndarray::{concatenate, Array2, Axis};

use crate::error::{QamError, Result};
use crate::nn::mlp::{Activation, ParamGrads, ParameterSet};

pub type NodeId = usize;

/// Recorded primitive operations. Each node owns its output value; the op
/// stores the input node ids and whatever the reverse sweep needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    /// `y = x W^T + b` with `w: [out, in]`, `b: [1, out]` leaves.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Act { x: NodeId, f: Activation },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Square { x: NodeId },
    Softplus { x: NodeId },
    /// Hard clip with exact subgradient (zero outside the box).
    Clip { x: NodeId, lo: f64, hi: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    Offset { x: NodeId },
    Concat { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Row-wise sum over columns: `[B, n] -> [B, 1]`.
    SumRows { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Handle to an MLP registered on a tape. Repeated applications share the
/// same parameter leaves, so gradients accumulate across all call sites.
#[derive(Debug, Clone)]
pub struct MlpHandle {
    layers: Vec<(NodeId, NodeId)>,
    acts: Vec<Activation>,
}

/// Define-by-run computation tape over dense `[B, n]` batches.
///
/// Records forward primitives in creation order; a single reverse sweep visits
/// each node exactly once in reverse topological order. Parameters are
/// snapshotted at registration.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradient store produced by [`Tape::backward`].
pub struct Grads {
    store: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the seeded output with respect to node `id`, if any flowed.
    pub fn of(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.store.get(id).and_then(Option::as_ref)
    }

    /// Parameter-shaped gradients for a registered MLP (zeros where none flowed).
    pub fn of_mlp(&self, handle: &MlpHandle, like: &ParameterSet) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(like);
        for (i, (wid, bid)) in handle.layers.iter().enumerate() {
            if let Some(gw) = self.of(*wid) {
                grads.layers[i].0.assign(gw);
            }
            if let Some(gb) = self.of(*bid) {
                grads.layers[i].1.assign(&gb.row(0));
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: gradients are not tracked through it.
    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf { requires_grad: false })
    }

    /// Input leaf whose gradient is retained (for input-gradient queries).
    pub fn input(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf { requires_grad: true })
    }

    /// Snapshots `params` onto the tape. With `trainable = false` the affine
    /// backward skips the parameter gradients entirely.
    pub fn register(&mut self, params: &ParameterSet, trainable: bool) -> MlpHandle {
        let mut layers = Vec::with_capacity(params.layers.len());
        let mut acts = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            let wid = self.push(l.w.clone(), Op::Leaf { requires_grad: trainable });
            let brow = l.b.clone().insert_axis(Axis(0));
            let bid = self.push(brow, Op::Leaf { requires_grad: trainable });
            layers.push((wid, bid));
            acts.push(l.act);
        }
        MlpHandle { layers, acts }
    }

    /// Applies a registered MLP to `x`.
    pub fn mlp(&mut self, handle: &MlpHandle, x: NodeId) -> NodeId {
        let mut h = x;
        for ((wid, bid), act) in handle.layers.iter().zip(handle.acts.iter()) {
            h = self.affine(h, *wid, *bid);
            if *act != Activation::Identity {
                h = self.act(h, *act);
            }
        }
        h
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mut z = self.nodes[x].value.dot(&self.nodes[w].value.t());
        z += &self.nodes[b].value.row(0);
        self.push(z, Op::Affine { x, w, b })
    }

    pub fn act(&mut self, x: NodeId, f: Activation) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| f.apply(t));
        self.push(v, Op::Act { x, f })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Tanh)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::exp);
        self.push(v, Op::Exp { x })
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::ln);
        self.push(v, Op::Ln { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t * t);
        self.push(v, Op::Square { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        // ln(1 + e^x), overflow-free.
        let v = self.nodes[x].value.mapv(|t| t.max(0.0) + (-t.abs()).exp().ln_1p());
        self.push(v, Op::Softplus { x })
    }

    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t.clamp(lo, hi));
        self.push(v, Op::Clip { x, lo, hi })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t * k);
        self.push(v, Op::Scale { x, k })
    }

    pub fn offset(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t + k);
        self.push(v, Op::Offset { x })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|id| self.nodes[*id].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat parts share row count");
        self.push(v, Op::Concat { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.nodes[x].value.mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll { x })
    }

    /// Reverse sweep seeded with `cotangent` at `output`. Consumes the tape:
    /// a second call is a usage error.
    pub fn backward(&mut self, output: NodeId, cotangent: Array2<f64>) -> Result<Grads> {
        if self.consumed {
            return Err(QamError::usage("tape already consumed by a backward sweep"));
        }
        if cotangent.dim() != self.nodes[output].value.dim() {
            return Err(QamError::config(format!(
                "cotangent shape {:?} does not match output shape {:?}",
                cotangent.dim(),
                self.nodes[output].value.dim()
            )));
        }
        self.consumed = true;

        let mut store: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        store[output] = Some(cotangent);

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = store[id].take() else { continue };
            self.backward_op(id, &g, &mut store);
            store[id] = Some(g);
        }
        Ok(Grads { store })
    }

    /// Convenience: backward from a scalar loss node with seed 1.
    pub fn backward_scalar(&mut self, loss: NodeId) -> Result<Grads> {
        self.backward(loss, Array2::from_elem((1, 1), 1.0))
    }

    fn accumulate(store: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
        match &mut store[id] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id].op, Op::Leaf { requires_grad: false })
    }

    fn backward_op(&self, id: NodeId, g: &Array2<f64>, store: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Affine { x, w, b } => {
                // dX = g W
                if self.wants_grad(*x) {
                    Self::accumulate(store, *x, g.dot(&self.nodes[*w].value));
                }
                if self.wants_grad(*w) {
                    // dW = g^T X
                    Self::accumulate(store, *w, g.t().dot(&self.nodes[*x].value));
                }
                if self.wants_grad(*b) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    Self::accumulate(store, *b, db);
                }
            }
            Op::Act { x, f } => {
                if self.wants_grad(*x) {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx)
                        .and(&self.nodes[*x].value)
                        .for_each(|d, &z| *d *= f.derivative(z));
                    Self::accumulate(store, *x, dx);
                }
            }
            Op::Exp { x } => {
                if self.wants_grad(*x) {
                    Self::accumulate(store, *x, g * &self.nodes[id].value);
                }
            }
            Op::Ln { x } => {
                if self.wants_grad(*x) {
                    Self::accumulate(store, *x, g / &self.nodes[*x].value);
                }
            }
            Op::Square { x } => {
                if self.wants_grad(*x) {
                    Self::accumulate(store, *x, 2.0 * &(g * &self.nodes[*x].value));
                }
            }
            Op::Softplus { x } => {
                if self.wants_grad(*x) {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx)
                        .and(&self.nodes[*x].value)
                        .for_each(|d, &z| *d *= 1.0 / (1.0 + (-z).exp()));
                    Self::accumulate(store, *x, dx);
                }
            }
            Op::Clip { x, lo, hi } => {
                if self.wants_grad(*x) {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx)
                        .and(&self.nodes[*x].value)
                        .for_each(|d, &z| {
                            if z < *lo || z > *hi {
                                *d = 0.0;
                            }
                        });
                    Self::accumulate(store, *x, dx);
                }
            }
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    Self::accumulate(store, *a, g.clone());
                }
                if self.wants_grad(*b) {
                    Self::accumulate(store, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(*a) {
                    Self::accumulate(store, *a, g.clone());
                }
                if self.wants_grad(*b) {
                    Self::accumulate(store, *b, g.mapv(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    Self::accumulate(store, *a, g * &self.nodes[*b].value);
                }
                if self.wants_grad(*b) {
                    Self::accumulate(store, *b, g * &self.nodes[*a].value);
                }
            }
            Op::Scale { x, k } => {
                if self.wants_grad(*x) {
                    Self::accumulate(store, *x, g.mapv(|v| v * k));
                }
            }
            Op::Offset { x } => {
                if self.wants_grad(*x) {
                    Self::accumulate(store, *x, g.clone());
                }
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for p in parts {
                    let w = self.nodes[*p].value.ncols();
                    if self.wants_grad(*p) {
                        let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        Self::accumulate(store, *p, slice);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.wants_grad(*x) {
                    let mut dx = Array2::zeros(self.nodes[*x].value.dim());
                    dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                    Self::accumulate(store, *x, dx);
                }
            }
            Op::SumRows { x } => {
                if self.wants_grad(*x) {
                    let (rows, cols) = self.nodes[*x].value.dim();
                    let mut dx = Array2::zeros((rows, cols));
                    for i in 0..rows {
                        let gi = g[[i, 0]];
                        dx.row_mut(i).fill(gi);
                    }
                    Self::accumulate(store, *x, dx);
                }
            }
            Op::SumAll { x } => {
                if self.wants_grad(*x) {
                    let dx = Array2::from_elem(self.nodes[*x].value.dim(), g[[0, 0]]);
                    Self::accumulate(store, *x, dx);
                }
            }
            Op::MeanAll { x } => {
                if self.wants_grad(*x) {
                    let n = self.nodes[*x].value.len() as f64;
                    let dx = Array2::from_elem(self.nodes[*x].value.dim(), g[[0, 0]] / n);
                    Self::accumulate(store, *x, dx);
                }
            }
        }
    }
}
