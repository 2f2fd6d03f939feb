use crate::nn::mlp::ParameterSet;

/// Exponential-moving-average copy of a network:
/// `target <- (1 - rate) * target + rate * online`, entrywise.
#[derive(Debug, Clone)]
pub struct EmaTracker {
    pub target: ParameterSet,
    pub rate: f64,
}

impl EmaTracker {
    pub fn new(online: &ParameterSet, rate: f64) -> Self {
        EmaTracker { target: online.clone(), rate }
    }

    pub fn update(&mut self, online: &ParameterSet) {
        let lam = self.rate;
        for (t, o) in self.target.layers.iter_mut().zip(online.layers.iter()) {
            ndarray::Zip::from(&mut t.w).and(&o.w).for_each(|t, &o| {
                *t = (1.0 - lam) * *t + lam * o;
            });
            ndarray::Zip::from(&mut t.b).and(&o.b).for_each(|t, &o| {
                *t = (1.0 - lam) * *t + lam * o;
            });
        }
    }
}
