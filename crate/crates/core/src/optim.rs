//! Parameter update rules. Plain SGD lives on the model itself
//! ([`TwoStreamModel::sgd_step`](crate::model::TwoStreamModel::sgd_step));
//! Adam keeps per-tensor moment estimates in the parameters' own shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::check_gradients;
use crate::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Adam<P> {
    m: P,
    v: P,
    steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<P: Parameters + Clone> Adam<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update. Gradients are validated before
    /// anything (parameters or moments) is modified.
    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Training(format!("learning rate must be positive, got {lr}")));
        }
        check_gradients(params, grads)?;
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let g = grads.named();
        let m = self.m.named_mut();
        let v = self.v.named_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(g).zip(m).zip(v) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
