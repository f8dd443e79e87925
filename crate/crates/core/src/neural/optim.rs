//! AdamW with decoupled weight decay.
//!
//! The decay multiplies the parameter down before the moment-based update
//! is applied, so regularisation never leaks into the moment estimates.
//! Setting `weight_decay` to zero recovers plain Adam.

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `sizes` lists the element count of each parameter tensor in the
    /// order they will be passed to [`AdamW::step`].
    pub fn new(sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` must match `params[i]` elementwise;
    /// parameters whose `frozen` flag is set are left untouched, moments
    /// included, so unfreezing later resumes from cold moments rather
    /// than stale ones.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], frozen: &[bool]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        assert_eq!(frozen.len(), params.len(), "frozen mask length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in params.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let g = grads[i];
            assert_eq!(g.len(), param.len(), "gradient size mismatch at {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let decay = 1.0 - self.lr * self.weight_decay;
            for j in 0..g.len() {
                param.data[j] *= decay;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                param.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
