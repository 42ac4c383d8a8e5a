use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one ordered group of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.dims())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// Applies one update. Parameters and gradients must follow the order the
    /// state was created with. Fails without touching anything on a shape
    /// mismatch or a non-finite gradient.
    pub fn apply(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "state tracks {} tensors, got {} params and {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.dims() != m.dims() || g.dims() != m.dims() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?}, grad {:?}, state {:?}", p.dims(), g.dims(), m.dims()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }

        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64c(c.beta1);
        let b2 = T::from_f64c(c.beta2);
        let one = T::one();
        let corr1 = T::from_f64c(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = T::from_f64c(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64c(c.lr);
        let eps = T::from_f64c(c.eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
