use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moments are kept for trainable entries only,
/// in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> =
            store.entries().iter().filter(|e| e.trainable).map(|e| Tensor::zeros(e.tensor.shape())).collect();
        Adam { beta1: BETA1, beta2: BETA2, eps: EPSILON, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. `grads` holds a gradient for every store entry (as
    /// returned by `Gradients::for_store`); entries that are not trainable
    /// are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        let step_size = T::from_f64_lossy(lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        let mut slot = 0;
        for (entry, g) in store.entries_mut().iter_mut().zip(grads) {
            if !entry.trainable {
                continue;
            }
            if g.shape() != entry.tensor.shape() {
                return Err(Error::Contract(format!(
                    "adam: gradient for {} has shape {:?}, parameter has {:?}",
                    entry.name,
                    g.shape(),
                    entry.tensor.shape()
                )));
            }
            let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
            for (((p, &g), m), v) in entry.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
            slot += 1;
        }
        Ok(())
    }
}
