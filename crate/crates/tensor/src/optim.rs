use crate::error::{Result, TensorError};
use crate::param::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Learning rate after `epoch` full epochs under a step schedule that divides
/// the rate by `factor` every `every` epochs.
pub fn step_decay_lr(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    if every == 0 {
        return base;
    }
    base / factor.powi((epoch / every) as i32)
}

/// Adam optimizer state: step counter and per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One Adam update. Parameters without a gradient are treated as having
    /// a zero gradient. Any non-finite gradient aborts before anything is
    /// modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(TensorError::invalid(
                "adam_step",
                format!(
                    "state tracks {} parameters, store has {}",
                    self.first_moment.len(),
                    store.len()
                ),
            ));
        }
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                let p = store.get(id);
                if g.shape() != p.value.shape() {
                    return Err(TensorError::ParamShape {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::lit(self.lr * bc2.sqrt() / bc1);
        let eps = T::lit(self.eps * bc2.sqrt());
        for id in store.ids() {
            let Some(g) = grads.param(id) else {
                // Zero gradient: moments decay, update uses the decayed moments.
                let m = self.first_moment[id.index()].data_mut();
                let v = self.second_moment[id.index()].data_mut();
                let p = store.value_mut(id).data_mut();
                for ((pi, mi), vi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                    *pi = *pi - step_size * *mi / (vi.sqrt() + eps);
                }
                continue;
            };
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for (((pi, mi), vi), &gi) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi = *pi - step_size * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
