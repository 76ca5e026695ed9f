//! Training-loop properties on the synthetic benchmark.

use proptest::prelude::*;
use refocus_core::ablation::{global_only, train_variant};
use refocus_core::config::RunConfig;
use refocus_core::data::generate;
use refocus_core::model::{fuse, Example, LocalMode, LossWeights, ModelConfig, TwoStreamModel};
use refocus_core::train::{local_input, train, TrainOptions};
use refocus_core::{Parameters, Tensor};

fn small_run() -> RunConfig {
    RunConfig::from_json(
        None,
        &[
            "data.train_per_class=6".into(),
            "data.test_per_class=3".into(),
            "train.epochs=2".into(),
        ],
    )
    .unwrap()
}

#[test]
fn fixed_batch_loss_strictly_decreases_for_50_sgd_steps() {
    let cfg = RunConfig::default();
    let (tr, _) = generate(&cfg.data).unwrap();
    let patches: Vec<Tensor> = tr[..8]
        .iter()
        .map(|s| local_input(s, &s.patches[0], cfg.train.patch_size).unwrap())
        .collect();
    let batch: Vec<Example> = tr[..8]
        .iter()
        .zip(&patches)
        .map(|(s, p)| Example {
            image: &s.image,
            patch: p,
            label: s.label,
        })
        .collect();
    for seed in 1..=3 {
        let mut model = TwoStreamModel::init(cfg.model.clone(), seed).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let (report, grads) = model.loss(&batch, &cfg.train.weights).unwrap();
            assert!(report.total < prev, "seed {seed} step {step}: {} !< {prev}", report.total);
            prev = report.total;
            model.sgd_step(&grads, 0.05).unwrap();
        }
    }
}

#[test]
fn lambda_zero_global_trajectory_ignores_the_local_variant() {
    let cfg = small_run();
    let (tr, te) = generate(&cfg.data).unwrap();
    let global = |m: &TwoStreamModel| -> Vec<Tensor> {
        m.named()
            .into_iter()
            .filter(|(n, _)| n.starts_with("global."))
            .map(|(_, t)| t.clone())
            .collect()
    };
    let mut reference = None;
    for mode in [LocalMode::Attention, LocalMode::CnnOnly, LocalMode::LstmLast, LocalMode::Sum(4)] {
        let mc = ModelConfig { mode, ..cfg.model.clone() };
        let init = TwoStreamModel::init(mc.clone(), cfg.train.seed).unwrap();
        let run = train_variant(&cfg, mc, global_only(), &tr, &te).unwrap();
        for ((name, a), (_, b)) in run.model.named().into_iter().zip(init.named()) {
            if name.starts_with("local.") {
                assert_eq!(a, b, "{mode:?}: {name} moved although lambda = 0");
            }
        }
        let accs: Vec<u64> = run.metrics.iter().map(|r| r.global_acc.to_bits()).collect();
        let losses: Vec<u64> = run.metrics.iter().map(|r| r.train_loss.to_bits()).collect();
        let g = global(&run.model);
        match &reference {
            None => reference = Some((g, accs, losses)),
            Some((g0, a0, l0)) => {
                assert!(g == *g0, "{mode:?}: global parameters differ");
                assert_eq!(&accs, a0, "{mode:?}");
                assert_eq!(&losses, l0, "{mode:?}");
            }
        }
    }
}

#[test]
fn forward_is_stateless() {
    let cfg = small_run();
    let (tr, _) = generate(&cfg.data).unwrap();
    let model = TwoStreamModel::init(cfg.model.clone(), 3).unwrap();
    let inputs: Vec<Tensor> = tr[..2]
        .iter()
        .map(|s| local_input(s, &s.patches[0], cfg.train.patch_size).unwrap())
        .collect();
    let w = LossWeights::default();
    let first = model.forward(&tr[0].image, &inputs[0], &w).unwrap();
    let _ = model.forward(&tr[1].image, &inputs[1], &w).unwrap();
    let again = model.forward(&tr[0].image, &inputs[0], &w).unwrap();
    assert_eq!(first.fused_probs, again.fused_probs);
    assert_eq!(first.alphas, again.alphas);
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let cfg = small_run();
    let (tr, te) = generate(&cfg.data).unwrap();
    let mut model = TwoStreamModel::init(cfg.model.clone(), 9).unwrap();
    let init = model.clone();
    let opts = TrainOptions {
        epochs: 0,
        ..cfg.train.clone()
    };
    assert!(train(&mut model, &tr, &te, &opts, |_| {}).unwrap().is_empty());
    assert_eq!(model, init);
}

#[test]
fn default_configuration_reaches_ninety_percent() {
    let cfg = RunConfig::default();
    let (tr, te) = generate(&cfg.data).unwrap();
    let run = train_variant(&cfg, cfg.model.clone(), cfg.train.weights, &tr, &te).unwrap();
    assert!(run.eval.fused_acc >= 0.9, "fused {}", run.eval.fused_acc);
}

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn fusion_is_invariant_to_common_weight_scaling(
        (g, l) in (2usize..9).prop_flat_map(|c| (probs(c), probs(c))),
        fg in 0.0f64..3.0,
        fl in 0.01f64..3.0,
        c in 0.01f64..100.0,
    ) {
        let g = Tensor::new(vec![1, g.len()], g).unwrap();
        let l = Tensor::new(vec![1, l.len()], l).unwrap();
        let w = |s: f64| LossWeights { lambda: 1.0, fusion_global: fg * s, fusion_local: fl * s };
        let a = fuse(&g, &l, &w(1.0)).unwrap();
        let b = fuse(&g, &l, &w(c)).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
    }
}
