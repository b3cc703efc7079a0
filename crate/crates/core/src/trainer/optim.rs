use crate::container::{Blob, BlobError};
use crate::diffcore::Tensor;
use crate::params::ParamSet;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet,
    pub v: ParamSet,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ParamSet| {
            let mut z = ParamSet::new();
            for (k, t) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        Self { lr, weight_decay, beta1, beta2, eps, m: zeros(params), v: zeros(params), t: 0 }
    }

    /// One update of `params` in place. Parameters without a gradient entry
    /// are only decayed.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("moment per parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment per parameter").data_mut();
            let g = grads.get(name).map(Tensor::data);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *x -= self.lr * (update + self.weight_decay * *x);
            }
        }
    }

    pub fn store(&self, blob: &mut Blob) {
        self.m.store(blob, "adam.m.");
        self.v.store(blob, "adam.v.");
        blob.put_u64("adam.t", &[1], vec![self.t]);
    }

    /// Restores moments and step count; hyperparameters come from the caller.
    pub fn restore(&mut self, blob: &Blob) -> Result<(), BlobError> {
        self.m = ParamSet::restore(blob, "adam.m.")?;
        self.v = ParamSet::restore(blob, "adam.v.")?;
        self.t = blob.u64s("adam.t")?.1[0];
        Ok(())
    }
}
