use crate::tensor::ParamStore;

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `v <- momentum * v + grad + weight_decay * param`, `param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update with learning rate `lr` and zeroes every gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, v) in store.iter_mut().zip(self.velocity.iter_mut()) {
            for ((w, g), v) in p.values.iter_mut().zip(p.grad.iter_mut()).zip(v.iter_mut()) {
                *v = self.momentum * *v + *g + self.weight_decay * *w;
                *w -= lr * *v;
                *g = 0.0;
            }
        }
    }
}

/// Free-function form of [`Sgd::step`].
pub fn sgd_step(store: &mut ParamStore, sgd: &mut Sgd, lr: f64) {
    sgd.step(store, lr);
}
