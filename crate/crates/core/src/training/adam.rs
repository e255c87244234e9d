use crate::error::{dim_err, Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every tensor of `store`; `grads` follows store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return dim_err("adam", format!("{} gradients for {} tensors", grads.len(), store.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() {
                return dim_err("adam", "gradient shape differs from parameter");
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
