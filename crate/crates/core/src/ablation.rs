//! The ablation tables: each trains the variants it compares and reports
//! fused test accuracy per row.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LocalMode, LossWeights, ModelConfig, TwoStreamModel};
use crate::train::{eval_step_feature, evaluate, train, EvalReport, MetricsRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Global-only baseline against the three local-stream variants.
    Components,
    /// Unweighted prefix sums `1~k` against attention pooling.
    SumVsAttn,
    /// Accuracy when the head reads a single step's state.
    StepFeatures,
    /// Attention model retrained for several step counts.
    StepSweep,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Components,
        AblationMode::SumVsAttn,
        AblationMode::StepFeatures,
        AblationMode::StepSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Components => "components",
            AblationMode::SumVsAttn => "sum_vs_attn",
            AblationMode::StepFeatures => "step_features",
            AblationMode::StepSweep => "step_sweep",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            AblationMode::Components => "model,accuracy",
            AblationMode::SumVsAttn => "aggregation,accuracy",
            AblationMode::StepFeatures => "time_step,accuracy",
            AblationMode::StepSweep => "time_steps,accuracy",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::Usage(format!("unknown ablation mode {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub mode: AblationMode,
    pub rows: Vec<(String, f64)>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", self.mode.header());
        for (label, acc) in &self.rows {
            s.push_str(&format!("{label},{acc:.6}\n"));
        }
        s
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, a)| *a)
    }
}

/// A trained variant and its final test evaluation.
pub struct Trained {
    pub model: TwoStreamModel,
    pub metrics: Vec<MetricsRow>,
    pub eval: EvalReport,
}

/// Trains one model under `cfg` with the model and loss weights replaced.
pub fn train_variant(
    cfg: &RunConfig,
    model: ModelConfig,
    weights: LossWeights,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<Trained> {
    let mut opts = cfg.train.clone();
    opts.weights = weights;
    let mut m = TwoStreamModel::init(model, opts.seed)?;
    let metrics = train(&mut m, train_set, test_set, &opts, |_| {})?;
    let eval = evaluate(&m, test_set, &weights, opts.eval_patch, opts.patch_size)?;
    Ok(Trained {
        model: m,
        metrics,
        eval,
    })
}

/// λ = 0 with fusion (1, 0): the global stream alone.
pub fn global_only() -> LossWeights {
    LossWeights {
        lambda: 0.0,
        fusion_global: 1.0,
        fusion_local: 0.0,
    }
}

fn with_mode(cfg: &RunConfig, mode: LocalMode) -> ModelConfig {
    ModelConfig {
        mode,
        ..cfg.model.clone()
    }
}

pub fn run(
    cfg: &RunConfig,
    mode: AblationMode,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<AblationTable> {
    let weights = cfg.train.weights;
    let fused = |m: ModelConfig, w: LossWeights| -> Result<f64> {
        Ok(train_variant(cfg, m, w, train_set, test_set)?.eval.fused_acc)
    };
    let rows = match mode {
        AblationMode::Components => vec![
            ("baseline".to_string(), fused(with_mode(cfg, LocalMode::Attention), global_only())?),
            ("cnn_only".to_string(), fused(with_mode(cfg, LocalMode::CnnOnly), weights)?),
            ("cnn_lstm".to_string(), fused(with_mode(cfg, LocalMode::LstmLast), weights)?),
            ("cnn_lstm_attention".to_string(), fused(with_mode(cfg, LocalMode::Attention), weights)?),
        ],
        AblationMode::SumVsAttn => {
            let t = cfg.model.time_steps;
            let mut rows = Vec::with_capacity(t + 1);
            for k in 1..=t {
                rows.push((format!("1~{k}"), fused(with_mode(cfg, LocalMode::Sum(k)), weights)?));
            }
            rows.push(("attention".to_string(), fused(with_mode(cfg, LocalMode::Attention), weights)?));
            rows
        }
        AblationMode::StepFeatures => {
            let trained = train_variant(cfg, with_mode(cfg, LocalMode::Attention), weights, train_set, test_set)?;
            let o = &cfg.train;
            (1..=cfg.model.time_steps)
                .map(|t| {
                    let acc = eval_step_feature(&trained.model, test_set, t, &weights, o.eval_patch, o.patch_size)?;
                    Ok((t.to_string(), acc))
                })
                .collect::<Result<_>>()?
        }
        AblationMode::StepSweep => {
            let mut rows = Vec::with_capacity(cfg.ablation.step_sweep.len());
            for &t in &cfg.ablation.step_sweep {
                let m = ModelConfig {
                    time_steps: t,
                    mode: LocalMode::Attention,
                    ..cfg.model.clone()
                };
                rows.push((t.to_string(), fused(m, weights)?));
            }
            rows
        }
    };
    Ok(AblationTable { mode, rows })
}
