use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Optimizer over every parameter currently in `store`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::for_params(store, store.ids().collect(), lr)
    }

    pub fn for_params(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let m = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, ids, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.ids {
            if store.get(id).grad.is_none() {
                return Err(Error::Contract(format!("parameter {} has no gradient", store.get(id).name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let g = p.grad.take().expect("checked above");
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
