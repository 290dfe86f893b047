//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: store
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.tensor.shape())))
                .collect(),
            v: store
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.tensor.shape())))
                .collect(),
        }
    }

    /// Apply one update. Parameters without a gradient this step still advance
    /// their moment decay, matching a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut by_id: Vec<Option<&Tensor>> = vec![None; self.m.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let p = store.get_mut(id);
            let g = by_id[i];
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (k, (mk, vk)) in m.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                p.data_mut()[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment tensors keyed by parameter name, for checkpointing.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for id in store.ids() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                out.push((format!("m/{}", store.name(id)), m.clone()));
                out.push((format!("v/{}", store.name(id)), v.clone()));
            }
        }
        out
    }

    pub fn load_state<'a>(
        &mut self,
        store: &ParamStore,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        self.step = step;
        for id in store.ids() {
            let i = id.index();
            if self.m[i].is_none() {
                continue;
            }
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{kind}/{}", store.name(id));
                let t = lookup(&key).ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimizer tensor `{key}`"))
                })?;
                *slot = Some(t.clone());
            }
        }
        Ok(())
    }
}
