//! Joint training loop and evaluation over in-memory samples.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{invalid, Result};
use crate::model::{fuse, Example, LossWeights, TwoStreamModel};
use crate::optim::{Adam, OptimizerKind};
use crate::patches::{crop_resize, select_patch, PatchSpec};
use crate::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPolicy {
    /// Uniform draw from the sample's patch list.
    Random,
    /// Always the first patch.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub weights: LossWeights,
    pub patch_policy: PatchPolicy,
    /// Local-stream input size `(h, w)` patches are resized to.
    pub patch_size: (usize, usize),
    /// Patch used at evaluation time.
    pub eval_patch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 8,
            lr: 0.2,
            optimizer: OptimizerKind::Sgd,
            seed: 1,
            weights: LossWeights::default(),
            patch_policy: PatchPolicy::Random,
            patch_size: (32, 32),
            eval_patch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub global_acc: f64,
    pub local_acc: f64,
    pub fused_acc: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,global_acc,local_acc,fused_acc";

    /// The deterministic columns; wall time is reported separately.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.global_acc, self.local_acc, self.fused_acc
        )
    }
}

fn patch_of(sample: &Sample, index: usize) -> Result<PatchSpec> {
    sample.patches.get(index).copied().ok_or_else(|| {
        invalid!(
            "sample {} has {} patches, index {index} requested",
            sample.image_id,
            sample.patches.len()
        )
    })
}

pub fn local_input(sample: &Sample, patch: &PatchSpec, size: (usize, usize)) -> Result<Tensor> {
    crop_resize(&sample.image, patch, size.0, size.1)
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub label: usize,
    pub global_pred: usize,
    pub local_pred: usize,
    pub fused_pred: usize,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub global_acc: f64,
    pub local_acc: f64,
    pub fused_acc: f64,
    pub rows: Vec<EvalRow>,
}

pub fn evaluate(
    model: &TwoStreamModel,
    samples: &[Sample],
    weights: &LossWeights,
    eval_patch: usize,
    patch_size: (usize, usize),
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    let (mut g, mut l, mut f) = (0usize, 0usize, 0usize);
    for s in samples {
        let patch = local_input(s, &patch_of(s, eval_patch)?, patch_size)?;
        let p = model.forward(&s.image, &patch, weights)?;
        let row = EvalRow {
            image_id: s.image_id.clone(),
            label: s.label,
            global_pred: p.global_probs.argmax(),
            local_pred: p.local_probs.argmax(),
            fused_pred: p.fused_probs.argmax(),
            alphas: p.alphas,
        };
        g += usize::from(row.global_pred == s.label);
        l += usize::from(row.local_pred == s.label);
        f += usize::from(row.fused_pred == s.label);
        rows.push(row);
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        global_acc: g as f64 / n,
        local_acc: l as f64 / n,
        fused_acc: f as f64 / n,
        rows,
    })
}

/// Fused accuracy when the local head reads the step-`t` state directly.
pub fn eval_step_feature(
    model: &TwoStreamModel,
    samples: &[Sample],
    t: usize,
    weights: &LossWeights,
    eval_patch: usize,
    patch_size: (usize, usize),
) -> Result<f64> {
    if t == 0 || t > model.time_steps() {
        return Err(invalid!("time step {t} outside [1, {}]", model.time_steps()));
    }
    let mut correct = 0usize;
    for s in samples {
        let patch = local_input(s, &patch_of(s, eval_patch)?, patch_size)?;
        let local = model.step_probs(&patch, t)?;
        let global = model.global_probs(&s.image)?;
        let fused = fuse(&global, &local, weights)?;
        correct += usize::from(fused.argmax() == s.label);
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Trains in place, evaluating on `test` after every epoch. The sample
/// order and patch draws come from independent streams of `opts.seed`.
pub fn train(
    model: &mut TwoStreamModel,
    train: &[Sample],
    test: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    opts.weights.validate()?;
    if opts.batch_size == 0 {
        return Err(invalid!("batch_size must be positive"));
    }
    if train.is_empty() && opts.epochs > 0 {
        return Err(invalid!("training set is empty"));
    }
    if let Some(s) = train.iter().chain(test).find(|s| s.label >= model.classes()) {
        return Err(invalid!(
            "sample {} has label {} but the model has {} classes",
            s.image_id,
            s.label,
            model.classes()
        ));
    }
    let root = Rng::new(opts.seed);
    let mut order_rng = root.fork(100);
    let mut patch_rng = root.fork(101);
    let mut adam = (opts.optimizer == OptimizerKind::Adam).then(|| Adam::new(&*model));
    let mut rows = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let mut patches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let p = match opts.patch_policy {
                    PatchPolicy::Random => select_patch(&mut patch_rng, &s.patches)?,
                    PatchPolicy::First => patch_of(s, 0)?,
                };
                patches.push(local_input(s, &p, opts.patch_size)?);
            }
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .zip(&patches)
                .map(|(&i, patch)| Example {
                    image: &train[i].image,
                    patch,
                    label: train[i].label,
                })
                .collect();
            let (report, grads) = model.loss(&batch, &opts.weights)?;
            loss_sum += report.total * chunk.len() as f64;
            match adam.as_mut() {
                Some(a) => a.step(model, &grads, opts.lr)?,
                None => model.sgd_step(&grads, opts.lr)?,
            }
        }
        let eval = evaluate(model, test, &opts.weights, opts.eval_patch, opts.patch_size)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            global_acc: eval.global_acc,
            local_acc: eval.local_acc,
            fused_acc: eval.fused_acc,
            wall_ms: started.elapsed().as_millis(),
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}
