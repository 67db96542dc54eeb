//! Adam over a fixed parameter list.

use crate::error::{Error, Result};
use crate::param::Parameter;

#[derive(Debug, Clone)]
pub struct Adam {
    params: Vec<Parameter>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    /// Frozen parameters in `params` are skipped.
    pub fn new(params: Vec<Parameter>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let params: Vec<Parameter> = params.into_iter().filter(|p| !p.is_frozen()).collect();
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            lr,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// Applies one update from the accumulated gradients, which are then
    /// cleared (the parameters get fresh leaves).
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("trainable parameter has a gradient slot");
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", p.name()),
                });
            }
            let mut w = p.to_vec();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.set_values(w)?;
        }
        Ok(())
    }
}
