//! AdamW with decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::encoder::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Array2<f64>> = params.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Decay multiplies decaying tensors by `1 - lr * wd` before
    /// the Adam step, as in the decoupled formulation.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("optimizer", "gradient and parameter lists differ"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..params.len() {
            let decay = if params.decays(i) { 1.0 - lr * weight_decay } else { 1.0 };
            let p = &mut params.tensors_mut()[i];
            if p.dim() != grads[i].dim() {
                return Err(Error::invalid("optimizer", format!("gradient {i} has the wrong shape")));
            }
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p = *p * decay - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
        Ok(())
    }
}
