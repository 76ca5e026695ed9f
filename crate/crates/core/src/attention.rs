//! Soft attention over the refiner's per-step states, plus the unweighted
//! prefix-sum used as the aggregation baseline.

use crate::error::{dim_err, invalid, Result};
use crate::params::{join, Parameters};
use crate::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// One scoring vector per step, or a single vector shared by all steps.
    pub w: Vec<Tensor>,
    pub time_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub aggregate: Tensor,
    pub alphas: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(time_steps: usize, dim: usize, shared: bool) -> Result<Self> {
        if time_steps == 0 || dim == 0 {
            return Err(invalid!(
                "attention needs positive sizes, got T={time_steps}, D={dim}"
            ));
        }
        let n = if shared { 1 } else { time_steps };
        Ok(Self {
            w: vec![Tensor::zeros(&[dim]); n],
            time_steps,
        })
    }

    /// Small uniform scoring vectors so initial attention is near uniform.
    pub fn init(time_steps: usize, dim: usize, shared: bool, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(time_steps, dim, shared)?;
        let bound = 1.0 / (dim as f64).sqrt();
        for w in &mut p.w {
            *w = Tensor::uniform(&[dim], bound, rng);
        }
        Ok(p)
    }

    pub fn is_shared(&self) -> bool {
        self.w.len() == 1 && self.time_steps != 1
    }

    pub fn dim(&self) -> usize {
        self.w[0].len()
    }

    fn scorer(&self, t: usize) -> &Tensor {
        if self.w.len() == 1 {
            &self.w[0]
        } else {
            &self.w[t]
        }
    }

    /// `score_t = w_t · h_t`, `alpha = softmax(score)`, `aggregate = Σ alpha_t h_t`.
    pub fn attend(&self, h: &[Tensor]) -> Result<(AttentionOutput, AttendCtx)> {
        if h.len() != self.time_steps {
            return Err(invalid!(
                "attention expects {} step states, got {}",
                self.time_steps,
                h.len()
            ));
        }
        let d = self.dim();
        if let Some((t, bad)) = h.iter().enumerate().find(|(_, v)| v.len() != d) {
            return Err(dim_err!(
                "step {t} state has shape {:?}, expected [{d}]",
                bad.shape()
            ));
        }
        let scores: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(t, ht)| dot(self.scorer(t).data(), ht.data()))
            .collect();
        let out = pool(&scores, h)?;
        let ctx = AttendCtx {
            h: h.to_vec(),
            alphas: out.alphas.clone(),
        };
        Ok((out, ctx))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted combination of `h` under raw `scores`.
pub fn pool(scores: &[f64], h: &[Tensor]) -> Result<AttentionOutput> {
    if scores.len() != h.len() || h.is_empty() {
        return Err(invalid!(
            "{} scores for {} step states",
            scores.len(),
            h.len()
        ));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let alphas: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut agg = vec![0.0; h[0].len()];
    for (a, ht) in alphas.iter().zip(h) {
        for (o, v) in agg.iter_mut().zip(ht.data()) {
            *o += a * v;
        }
    }
    Ok(AttentionOutput {
        aggregate: Tensor::vector(agg),
        alphas,
    })
}

#[derive(Debug)]
pub struct AttendCtx {
    h: Vec<Tensor>,
    alphas: Vec<f64>,
}

impl AttendCtx {
    /// Accumulates scoring-vector gradients into `grads` and returns the
    /// gradient w.r.t. each step state.
    pub fn backward(
        self,
        grad_aggregate: &Tensor,
        params: &AttentionParams,
        grads: &mut AttentionParams,
    ) -> Result<Vec<Tensor>> {
        let d = params.dim();
        if grad_aggregate.len() != d {
            return Err(dim_err!(
                "attention backward expects [{d}], got {:?}",
                grad_aggregate.shape()
            ));
        }
        let g = grad_aggregate.data();
        let dalpha: Vec<f64> = self.h.iter().map(|ht| dot(g, ht.data())).collect();
        let mean: f64 = self.alphas.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
        let mut dh = Vec::with_capacity(self.h.len());
        for (t, ht) in self.h.iter().enumerate() {
            let a = self.alphas[t];
            let dscore = a * (dalpha[t] - mean);
            let w = params.scorer(t).data();
            dh.push(Tensor::vector(
                (0..d).map(|j| a * g[j] + dscore * w[j]).collect(),
            ));
            let slot = if grads.w.len() == 1 { 0 } else { t };
            for (gw, hv) in grads.w[slot].data_mut().iter_mut().zip(ht.data()) {
                *gw += dscore * hv;
            }
        }
        Ok(dh)
    }
}

/// Unweighted `Σ_{t=1..k} h_t`.
pub fn sum_prefix(h: &[Tensor], k: usize) -> Result<Tensor> {
    if k == 0 || k > h.len() {
        return Err(invalid!("summation prefix {k} outside [1, {}]", h.len()));
    }
    let mut acc = h[0].clone();
    for ht in &h[1..k] {
        acc.add_assign(ht)?;
    }
    Ok(acc)
}

/// Gradients of `sum_prefix(h, k)` w.r.t. each of the `steps` states.
pub fn sum_prefix_backward(grad: &Tensor, steps: usize, k: usize) -> Vec<Option<Tensor>> {
    (0..steps)
        .map(|t| (t < k).then(|| grad.clone()))
        .collect()
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (t, w) in self.w.iter().enumerate() {
            out.push((join(prefix, &format!("w{t}")), w));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (t, w) in self.w.iter_mut().enumerate() {
            out.push((join(prefix, &format!("w{t}")), w));
        }
    }
}
