use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction. Frozen parameters are skipped entirely.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        self.moments.resize_with(ids.len(), || None);
        for (slot, id) in self.moments.iter_mut().zip(ids) {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let (r, c) = p.value.shape();
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(r, c), Tensor::zeros(r, c)));
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
