//! The two-stream classifier: a global stream over the whole image and a
//! local stream over one patch, trained with a weighted sum of their
//! cross-entropies and fused at prediction time.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams};
use crate::backbone::BackboneParams;
use crate::error::{dim_err, invalid, Error, Result};
use crate::params::{join, Linear, Parameters};
use crate::refiner::RefinerParams;
use crate::tensor::ops::{self, AffineCtx};
use crate::{Rng, Tensor};

/// How the local stream turns the pooled patch feature into the vector its
/// classifier head consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// Pooled CNN feature straight into the head.
    CnnOnly,
    /// Refiner states, every step supervised during training; the last step
    /// is used for prediction.
    LstmLast,
    /// Refiner states pooled by soft attention.
    Attention,
    /// Unweighted sum of the first `k` refiner states.
    Sum(usize),
}

impl LocalMode {
    pub fn uses_refiner(self) -> bool {
        !matches!(self, LocalMode::CnnOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each backbone layer; the last is the feature width.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub time_steps: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub shared_attention: bool,
    pub mode: LocalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![8, 16, 32],
            classes: 8,
            time_steps: 10,
            hidden: 32,
            lstm_layers: 2,
            shared_attention: false,
            mode: LocalMode::Attention,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    fn head_input(&self) -> usize {
        if self.mode.uses_refiner() {
            self.hidden
        } else {
            self.feature_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.time_steps == 0 {
            return Err(Error::Config("time_steps must be at least 1".into()));
        }
        if let LocalMode::Sum(k) = self.mode {
            if k == 0 || k > self.time_steps {
                return Err(Error::Config(format!(
                    "summation prefix {k} outside [1, {}]",
                    self.time_steps
                )));
            }
        }
        Ok(())
    }
}

/// Weight of the local loss, and the per-stream fusion weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub fusion_global: f64,
    pub fusion_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            fusion_global: 1.0,
            fusion_local: 1.0,
        }
    }
}

impl LossWeights {
    /// Fusion weights that mirror the loss weights: global 1, local λ.
    pub fn mirrored(lambda: f64) -> Self {
        Self {
            lambda,
            fusion_global: 1.0,
            fusion_local: lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.fusion_global >= 0.0) || !(self.fusion_local >= 0.0) {
            return Err(Error::Config(format!("weights must be non-negative: {self:?}")));
        }
        if self.fusion_global + self.fusion_local <= 0.0 {
            return Err(Error::Config("fusion weights sum to zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub global_probs: Tensor,
    pub local_probs: Tensor,
    pub fused_probs: Tensor,
    /// Attention weights; empty when the local stream does not attend.
    pub alphas: Vec<f64>,
}

/// `normalize(wg·G + wl·L)`.
pub fn fuse(global: &Tensor, local: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    global.expect_same_shape(local)?;
    let mixed: Vec<f64> = global
        .data()
        .iter()
        .zip(local.data())
        .map(|(g, l)| weights.fusion_global * g + weights.fusion_local * l)
        .collect();
    let total: f64 = mixed.iter().sum();
    if total <= 0.0 {
        return Err(invalid!("fused probabilities sum to {total}"));
    }
    Ok(Tensor::vector(mixed.into_iter().map(|v| v / total).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamModel {
    pub config: ModelConfig,
    pub global_backbone: BackboneParams,
    pub global_head: Linear,
    pub local_backbone: BackboneParams,
    pub refiner: RefinerParams,
    pub attention: AttentionParams,
    /// Two dense layers with a relu between.
    pub local_head: [Linear; 2],
}

/// One training example with its patch already cropped and resized.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a Tensor,
    pub patch: &'a Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub global: f64,
    pub local: f64,
}

pub(crate) struct HeadCtx {
    first: AffineCtx,
    relu: ops::ActivationCtx,
    second: AffineCtx,
}

impl TwoStreamModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let c = &config;
        let d_feat = c.feature_dim();
        let model = Self {
            global_backbone: BackboneParams::init(c.in_channels, &c.widths, &mut root.fork(1))?,
            global_head: Linear::init(d_feat, c.classes, &mut root.fork(2)),
            local_backbone: BackboneParams::init(c.in_channels, &c.widths, &mut root.fork(3))?,
            refiner: RefinerParams::init(d_feat, c.hidden, c.lstm_layers, c.time_steps, &mut root.fork(4))?,
            attention: AttentionParams::init(c.time_steps, c.hidden, c.shared_attention, &mut root.fork(5))?,
            local_head: {
                let mut r = root.fork(6);
                [
                    Linear::init(c.head_input(), c.hidden, &mut r),
                    Linear::init(c.hidden, c.classes, &mut r),
                ]
            },
            config,
        };
        model.validate()?;
        Ok(model)
    }

    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d_feat = c.feature_dim();
        Ok(Self {
            global_backbone: BackboneParams::zeros(c.in_channels, &c.widths)?,
            global_head: Linear::zeros(d_feat, c.classes),
            local_backbone: BackboneParams::zeros(c.in_channels, &c.widths)?,
            refiner: RefinerParams::zeros(d_feat, c.hidden, c.lstm_layers, c.time_steps)?,
            attention: AttentionParams::zeros(c.time_steps, c.hidden, c.shared_attention)?,
            local_head: [
                Linear::zeros(c.head_input(), c.hidden),
                Linear::zeros(c.hidden, c.classes),
            ],
            config,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn time_steps(&self) -> usize {
        self.refiner.time_steps
    }

    pub fn validate(&self) -> Result<()> {
        let gc = self.global_head.outputs();
        let lc = self.local_head[1].outputs();
        if gc != lc {
            return Err(Error::Config(format!(
                "global head predicts {gc} classes but local head predicts {lc}"
            )));
        }
        if self.global_head.inputs() != self.global_backbone.feature_channels() {
            return Err(Error::Config("global head input != global feature width".into()));
        }
        if self.local_head[0].outputs() != self.local_head[1].inputs() {
            return Err(Error::Config("local head layers disagree".into()));
        }
        Ok(())
    }

    fn global_logits(&self, image: &Tensor) -> Result<(Tensor, crate::backbone::VectorCtx, AffineCtx)> {
        let (v, vctx) = self.global_backbone.extract_vector(image)?;
        let (logits, hctx) = ops::affine(&v, &self.global_head.w, &self.global_head.b)?;
        Ok((logits, vctx, hctx))
    }

    /// Local classifier head on a single `[D]` representation.
    pub(crate) fn head(&self, rep: &Tensor) -> Result<(Tensor, HeadCtx)> {
        let x = Tensor::from_parts(vec![1, rep.len()], rep.data().to_vec());
        let [l1, l2] = &self.local_head;
        let (z1, first) = ops::affine(&x, &l1.w, &l1.b)?;
        let (a1, relu) = ops::relu(&z1);
        let (logits, second) = ops::affine(&a1, &l2.w, &l2.b)?;
        Ok((logits, HeadCtx { first, relu, second }))
    }

    pub(crate) fn head_backward(ctx: HeadCtx, dlogits: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let g2 = ctx.second.backward(dlogits)?;
        grads.local_head[1].w.add_assign(&g2.w)?;
        grads.local_head[1].b.add_assign(&g2.b)?;
        let dz1 = ctx.relu.backward(&g2.x)?;
        let g1 = ctx.first.backward(&dz1)?;
        grads.local_head[0].w.add_assign(&g1.w)?;
        grads.local_head[0].b.add_assign(&g1.b)?;
        Ok(Tensor::vector(g1.x.into_data()))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes() {
            return Err(invalid!("label {label} outside [0, {})", self.classes()));
        }
        Ok(())
    }

    /// Probabilities of both streams and their fusion. `patch` is the crop
    /// already resized to the local stream's input size.
    pub fn forward(&self, image: &Tensor, patch: &Tensor, weights: &LossWeights) -> Result<Prediction> {
        self.validate()?;
        let (g_logits, _, _) = self.global_logits(image)?;
        let (global_probs, _) = ops::softmax(&g_logits)?;
        let (f, _) = self.local_backbone.extract_vector(patch)?;
        let f = Tensor::vector(f.into_data());
        let (rep, alphas) = match self.config.mode {
            LocalMode::CnnOnly => (f, Vec::new()),
            mode => {
                let (hs, _) = self.refiner.unroll(&f)?;
                match mode {
                    LocalMode::Attention => {
                        let (out, _) = self.attention.attend(&hs)?;
                        (out.aggregate, out.alphas)
                    }
                    LocalMode::Sum(k) => (attention::sum_prefix(&hs, k)?, Vec::new()),
                    _ => (hs.last().expect("T >= 1").clone(), Vec::new()),
                }
            }
        };
        let (l_logits, _) = self.head(&rep)?;
        let (local_probs, _) = ops::softmax(&l_logits)?;
        let global_probs = Tensor::vector(global_probs.into_data());
        let local_probs = Tensor::vector(local_probs.into_data());
        let fused_probs = fuse(&global_probs, &local_probs, weights)?;
        Ok(Prediction {
            global_probs,
            local_probs,
            fused_probs,
            alphas,
        })
    }

    /// Refiner states for a patch, `T` vectors of size `D`.
    pub fn step_states(&self, patch: &Tensor) -> Result<Vec<Tensor>> {
        let (f, _) = self.local_backbone.extract_vector(patch)?;
        let (hs, _) = self.refiner.unroll(&Tensor::vector(f.into_data()))?;
        Ok(hs)
    }

    /// Local-head probabilities computed from the single step-`t` state
    /// (1-based), bypassing aggregation.
    pub fn step_probs(&self, patch: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.time_steps() {
            return Err(invalid!("time step {t} outside [1, {}]", self.time_steps()));
        }
        let hs = self.step_states(patch)?;
        let (logits, _) = self.head(&hs[t - 1])?;
        let (p, _) = ops::softmax(&logits)?;
        Ok(Tensor::vector(p.into_data()))
    }

    /// Global-stream probabilities alone.
    pub fn global_probs(&self, image: &Tensor) -> Result<Tensor> {
        let (g_logits, _, _) = self.global_logits(image)?;
        let (p, _) = ops::softmax(&g_logits)?;
        Ok(Tensor::vector(p.into_data()))
    }

    /// Loss of one example, accumulating parameter gradients (scaled by
    /// `scale`) into `grads`.
    pub fn example_loss(
        &self,
        ex: &Example<'_>,
        weights: &LossWeights,
        scale: f64,
        grads: &mut Self,
    ) -> Result<LossReport> {
        self.check_label(ex.label)?;
        let labels = [ex.label];

        let (g_logits, vctx, hctx) = self.global_logits(ex.image)?;
        let (g_loss, _, xent) = ops::softmax_cross_entropy(&g_logits, &labels)?;
        let dlogits = xent.backward(scale);
        let hg = hctx.backward(&dlogits)?;
        grads.global_head.w.add_assign(&hg.w)?;
        grads.global_head.b.add_assign(&hg.b)?;
        vctx.backward(&hg.x, &mut grads.global_backbone)?;

        let lambda = weights.lambda;
        if lambda == 0.0 {
            return Ok(LossReport {
                total: g_loss,
                global: g_loss,
                local: 0.0,
            });
        }
        let local_scale = scale * lambda;
        let (f, fctx) = self.local_backbone.extract_vector(ex.patch)?;
        let f = Tensor::vector(f.into_data());
        let (l_loss, df) = match self.config.mode {
            LocalMode::CnnOnly => {
                let (logits, head) = self.head(&f)?;
                let (loss, _, xent) = ops::softmax_cross_entropy(&logits, &labels)?;
                let df = Self::head_backward(head, &xent.backward(local_scale), grads)?;
                (loss, df)
            }
            LocalMode::LstmLast => {
                let (hs, uctx) = self.refiner.unroll(&f)?;
                let steps = hs.len() as f64;
                let mut total = 0.0;
                let mut dhs = Vec::with_capacity(hs.len());
                for h in &hs {
                    let (logits, head) = self.head(h)?;
                    let (loss, _, xent) = ops::softmax_cross_entropy(&logits, &labels)?;
                    total += loss / steps;
                    let dh = Self::head_backward(head, &xent.backward(local_scale / steps), grads)?;
                    dhs.push(Some(dh));
                }
                let df = uctx.backward(&dhs, &self.refiner, &mut grads.refiner)?;
                (total, df)
            }
            LocalMode::Attention => {
                let (hs, uctx) = self.refiner.unroll(&f)?;
                let (out, actx) = self.attention.attend(&hs)?;
                let (logits, head) = self.head(&out.aggregate)?;
                let (loss, _, xent) = ops::softmax_cross_entropy(&logits, &labels)?;
                let dagg = Self::head_backward(head, &xent.backward(local_scale), grads)?;
                let dhs = actx.backward(&dagg, &self.attention, &mut grads.attention)?;
                let dhs: Vec<_> = dhs.into_iter().map(Some).collect();
                let df = uctx.backward(&dhs, &self.refiner, &mut grads.refiner)?;
                (loss, df)
            }
            LocalMode::Sum(k) => {
                let (hs, uctx) = self.refiner.unroll(&f)?;
                let agg = attention::sum_prefix(&hs, k)?;
                let (logits, head) = self.head(&agg)?;
                let (loss, _, xent) = ops::softmax_cross_entropy(&logits, &labels)?;
                let dagg = Self::head_backward(head, &xent.backward(local_scale), grads)?;
                let dhs = attention::sum_prefix_backward(&dagg, hs.len(), k);
                let df = uctx.backward(&dhs, &self.refiner, &mut grads.refiner)?;
                (loss, df)
            }
        };
        let df = Tensor::from_parts(vec![1, df.len()], df.into_data());
        fctx.backward(&df, &mut grads.local_backbone)?;
        Ok(LossReport {
            total: g_loss + lambda * l_loss,
            global: g_loss,
            local: l_loss,
        })
    }

    /// Mean joint loss over `batch` and the gradient of that mean.
    pub fn loss(&self, batch: &[Example<'_>], weights: &LossWeights) -> Result<(LossReport, Self)> {
        weights.validate()?;
        if batch.is_empty() {
            return Err(invalid!("empty batch"));
        }
        if let Some(ex) = batch.iter().find(|ex| ex.label >= self.classes()) {
            return Err(invalid!("label {} outside [0, {})", ex.label, self.classes()));
        }
        let mut grads = self.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut report = LossReport {
            total: 0.0,
            global: 0.0,
            local: 0.0,
        };
        for ex in batch {
            let r = self.example_loss(ex, weights, scale, &mut grads)?;
            report.total += r.total * scale;
            report.global += r.global * scale;
            report.local += r.local * scale;
        }
        Ok((report, grads))
    }

    /// `p ← p − lr·g` for every parameter. All gradients are checked before
    /// any parameter is written.
    pub fn sgd_step(&mut self, grads: &Self, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Training(format!("learning rate must be positive, got {lr}")));
        }
        check_gradients(self, grads)?;
        let theirs = grads.named();
        for ((_, p), (_, g)) in self.named_mut().into_iter().zip(theirs) {
            p.axpy(-lr, g)?;
        }
        Ok(())
    }
}

/// Fails, naming the tensor, if any gradient is non-finite or misshaped.
pub(crate) fn check_gradients<P: Parameters>(params: &P, grads: &P) -> Result<()> {
    let mine = params.named();
    let theirs = grads.named();
    if mine.len() != theirs.len() {
        return Err(Error::Training("gradient structure differs from model".into()));
    }
    for ((name, p), (_, g)) in mine.iter().zip(&theirs) {
        if p.shape() != g.shape() {
            return Err(dim_err!("gradient for {name} has shape {:?}, expected {:?}", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
    }
    Ok(())
}

impl Parameters for TwoStreamModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.global_backbone.visit(&join(prefix, "global.backbone"), out);
        self.global_head.visit(&join(prefix, "global.head"), out);
        self.local_backbone.visit(&join(prefix, "local.backbone"), out);
        self.refiner.visit(&join(prefix, "local.refiner"), out);
        self.attention.visit(&join(prefix, "local.attention"), out);
        self.local_head[0].visit(&join(prefix, "local.head0"), out);
        self.local_head[1].visit(&join(prefix, "local.head1"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.global_backbone.visit_mut(&join(prefix, "global.backbone"), out);
        self.global_head.visit_mut(&join(prefix, "global.head"), out);
        self.local_backbone.visit_mut(&join(prefix, "local.backbone"), out);
        self.refiner.visit_mut(&join(prefix, "local.refiner"), out);
        self.attention.visit_mut(&join(prefix, "local.attention"), out);
        let [h0, h1] = &mut self.local_head;
        h0.visit_mut(&join(prefix, "local.head0"), out);
        h1.visit_mut(&join(prefix, "local.head1"), out);
    }
}
