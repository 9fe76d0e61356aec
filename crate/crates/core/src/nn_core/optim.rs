use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2.25e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are created lazily per
/// trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in ids {
            let (w, g) = store.value_and_grad_mut(id);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
            for k in 0..w.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[k]);
            }
        }
    }
}
