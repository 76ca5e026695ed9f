//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use refocus_core::attention::{pool, sum_prefix, sum_prefix_backward, AttentionParams};
use refocus_core::backbone::BackboneParams;
use refocus_core::model::{Example, LocalMode, LossWeights, ModelConfig, TwoStreamModel};
use refocus_core::refiner::{lstm_cell, LstmLayerParams, RefinerParams};
use refocus_core::tensor::gradcheck::{check_primitive, max_relative_error, relative_error, Backward, DEFAULT_EPS};
use refocus_core::tensor::ops::{self, Activation};
use refocus_core::{Parameters, Result, Rng, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 10;

pub fn set_params<P: Parameters>(p: &mut P, values: &[Tensor]) {
    for ((_, t), v) in p.named_mut().into_iter().zip(values) {
        *t = v.clone();
    }
}

pub fn flatten<P: Parameters>(p: &P) -> Vec<Tensor> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

// ---------------------------------------------------------------------------
// Scalar LSTM replay

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Re-derives every step with plain nested loops over `f64`s, reading the
/// weights element by element. Shares no code with the refiner.
pub fn replay_unroll(p: &RefinerParams, f: &[f64]) -> Vec<Vec<f64>> {
    let layers = &p.layers;
    let mut h: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.bias[0].len()]).collect();
    let mut c = h.clone();
    let mut out = Vec::new();
    for _ in 0..p.time_steps {
        let mut x = f.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let d = layer.bias[0].len();
            let di = x.len();
            let mut pre = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            for (k, pk) in pre.iter_mut().enumerate() {
                for j in 0..d {
                    let mut s = layer.bias[k].data()[j];
                    for r in 0..di {
                        s += x[r] * layer.w_input[k].data()[r * d + j];
                    }
                    for r in 0..d {
                        s += h[l][r] * layer.w_hidden[k].data()[r * d + j];
                    }
                    pk[j] = s;
                }
            }
            for j in 0..d {
                let i = sig(pre[0][j]);
                let fg = sig(pre[1][j]);
                let g = pre[2][j].tanh();
                let o = sig(pre[3][j]);
                c[l][j] = fg * c[l][j] + i * g;
                h[l][j] = o * c[l][j].tanh();
            }
            x = h[l].clone();
        }
        out.push(x);
    }
    out
}

/// Largest |Δ| between `unroll` and the replay on one random configuration.
pub fn replay_trial(rng: &mut Rng) -> (f64, String) {
    let input = 1 + rng.below(4);
    let hidden = 1 + rng.below(4);
    let layers = 1 + rng.below(3);
    let steps = 1 + rng.below(6);
    let mut p = RefinerParams::init(input, hidden, layers, steps, rng).unwrap();
    // Larger weights push gates away from their linear regime.
    for (_, t) in p.named_mut() {
        *t = t.scale(1.0 + 2.0 * rng.uniform(0.0, 1.0));
    }
    let f = Tensor::uniform(&[input], 2.0, rng);
    let (hs, _) = p.unroll(&f).unwrap();
    let oracle = replay_unroll(&p, f.data());
    let mut worst = 0.0f64;
    for (a, b) in hs.iter().zip(&oracle) {
        for (x, y) in a.data().iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    (worst, format!("D_in={input} D={hidden} L={layers} T={steps}"))
}

// ---------------------------------------------------------------------------
// Attention algebra

#[derive(Debug, Default)]
pub struct AlgebraStats {
    pub mean_mismatch: usize,
    pub hull_violations: usize,
    pub worst_alpha_sum: f64,
}

pub fn attention_trial(rng: &mut Rng, stats: &mut AlgebraStats) {
    let t = 1 + rng.below(12);
    let d = 1 + rng.below(8);
    let scale = [0.1, 1.0, 30.0][rng.below(3)];
    let h: Vec<Tensor> = (0..t).map(|_| Tensor::uniform(&[d], scale, rng)).collect();

    // Uniform scores against the arithmetic mean.
    let c = rng.uniform(-5.0, 5.0);
    let out = pool(&vec![c; t], &h).unwrap();
    let tf = t as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| h.iter().map(|ht| ht.data()[j] / tf).sum::<f64>())
        .collect();
    let uniform_ok = out.alphas.iter().all(|&a| a == 1.0 / tf)
        && out
            .aggregate
            .data()
            .iter()
            .zip(&mean)
            .all(|(a, m)| (a - m).abs() <= 4.0 * f64::EPSILON * m.abs().max(scale));
    if !uniform_ok {
        stats.mean_mismatch += 1;
    }

    // Random attention: convex hull and normalisation.
    let params = AttentionParams::init(t, d, rng.below(2) == 0, rng).unwrap();
    let mut params = params;
    for w in &mut params.w {
        *w = w.scale(rng.uniform(0.0, 20.0));
    }
    let (out, _) = params.attend(&h).unwrap();
    let total: f64 = out.alphas.iter().sum();
    stats.worst_alpha_sum = stats.worst_alpha_sum.max((total - 1.0).abs());
    for j in 0..d {
        let lo = h.iter().map(|v| v.data()[j]).fold(f64::INFINITY, f64::min);
        let hi = h.iter().map(|v| v.data()[j]).fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * scale;
        let v = out.aggregate.data()[j];
        if v < lo - slack || v > hi + slack || out.alphas.iter().any(|&a| a < 0.0) {
            stats.hull_violations += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference suite

pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub instances: usize,
    /// Draws rejected because the perturbation straddled a relu kink.
    pub discarded: usize,
}

/// Bounded away from zero so relu kinks are not straddled by ±eps.
fn away_from_zero(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, bound, rng);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    t
}

fn case(name: &'static str, (errs, discarded): (Vec<f64>, usize)) -> GradCase {
    GradCase {
        name,
        worst: errs.iter().copied().fold(0.0, f64::max),
        instances: errs.len(),
        discarded,
    }
}

fn repeat(rng: &mut Rng, mut f: impl FnMut(&mut Rng) -> f64) -> (Vec<f64>, usize) {
    ((0..INSTANCES).map(|_| f(rng)).collect(), 0)
}

/// Draws until `INSTANCES` smooth instances have been checked.
fn repeat_smooth(rng: &mut Rng, mut f: impl FnMut(&mut Rng) -> Option<f64>) -> (Vec<f64>, usize) {
    let mut errs = Vec::with_capacity(INSTANCES);
    let mut discarded = 0;
    while errs.len() < INSTANCES {
        match f(rng) {
            Some(e) => errs.push(e),
            None => discarded += 1,
        }
        assert!(discarded < 5 * INSTANCES, "too many kinked draws");
    }
    (errs, discarded)
}

fn affine_case(rng: &mut Rng) -> f64 {
    let n = 1 + rng.below(3);
    let (i, o) = (1 + rng.below(5), 1 + rng.below(5));
    let xs = [
        Tensor::uniform(&[n, i], 1.0, rng),
        Tensor::uniform(&[i, o], 1.0, rng),
        Tensor::uniform(&[o], 1.0, rng),
    ];
    check_primitive(&xs, DEFAULT_EPS, rng, |xs| {
        let (y, ctx) = ops::affine(&xs[0], &xs[1], &xs[2])?;
        let back: Backward = Box::new(move |g| {
            let gr = ctx.backward(g)?;
            Ok(vec![gr.x, gr.w, gr.b])
        });
        Ok((y, back))
    })
    .unwrap()
}

fn conv_case(rng: &mut Rng) -> f64 {
    let stride = 1 + rng.below(2);
    let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
    let (h, w) = (3 + rng.below(4), 3 + rng.below(4));
    let xs = [
        Tensor::uniform(&[1, ci, h, w], 1.0, rng),
        Tensor::uniform(&[co, ci, 3, 3], 1.0, rng),
        Tensor::uniform(&[co], 1.0, rng),
    ];
    check_primitive(&xs, DEFAULT_EPS, rng, |xs| {
        let (y, ctx) = ops::conv2d(&xs[0], &xs[1], &xs[2], stride)?;
        let back: Backward = Box::new(move |g| {
            let gr = ctx.backward(g)?;
            Ok(vec![gr.x, gr.k, gr.b])
        });
        Ok((y, back))
    })
    .unwrap()
}

fn activation_case(kind: Activation) -> impl FnMut(&mut Rng) -> f64 {
    move |rng| {
        let xs = [away_from_zero(&[2, 4], 3.0, rng)];
        check_primitive(&xs, DEFAULT_EPS, rng, |xs| {
            let (y, ctx) = ops::activate(kind, &xs[0]);
            let back: Backward = Box::new(move |g| Ok(vec![ctx.backward(g)?]));
            Ok((y, back))
        })
        .unwrap()
    }
}

fn gap_case(rng: &mut Rng) -> f64 {
    let xs = [Tensor::uniform(&[1 + rng.below(2), 3, 1 + rng.below(4), 1 + rng.below(4)], 1.0, rng)];
    check_primitive(&xs, DEFAULT_EPS, rng, |xs| {
        let (y, ctx) = ops::gap(&xs[0])?;
        let back: Backward = Box::new(move |g| Ok(vec![ctx.backward(g)?]));
        Ok((y, back))
    })
    .unwrap()
}

fn softmax_case(rng: &mut Rng) -> f64 {
    let xs = [Tensor::uniform(&[1 + rng.below(3), 2 + rng.below(5)], 3.0, rng)];
    check_primitive(&xs, DEFAULT_EPS, rng, |xs| {
        let (y, ctx) = ops::softmax(&xs[0])?;
        let back: Backward = Box::new(move |g| Ok(vec![ctx.backward(g)?]));
        Ok((y, back))
    })
    .unwrap()
}

fn xent_case(rng: &mut Rng) -> f64 {
    let (n, c) = (1 + rng.below(3), 2 + rng.below(5));
    let logits = Tensor::uniform(&[n, c], 3.0, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let (_, _, ctx) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
    let g = ctx.backward(1.0);
    max_relative_error(&[logits], &[g], DEFAULT_EPS, |xs| {
        ops::softmax_cross_entropy(&xs[0], &labels).unwrap().0
    })
}

fn cell_case(rng: &mut Rng) -> f64 {
    let (di, d) = (1 + rng.below(4), 1 + rng.below(4));
    let p = LstmLayerParams::init(di, d, rng);
    let x = Tensor::uniform(&[di], 1.0, rng);
    let h = Tensor::uniform(&[d], 1.0, rng);
    let c = Tensor::uniform(&[d], 1.0, rng);
    let rh = Tensor::uniform(&[d], 1.0, rng);
    let rc = Tensor::uniform(&[d], 1.0, rng);
    let (_, _, ctx) = lstm_cell(&p, &x, &h, &c).unwrap();
    let mut grads = p.zeros_like();
    let (dx, dh, dc) = ctx.backward(rh.data(), rc.data(), &p, &mut grads);
    let mut inputs = vec![x, h, c];
    inputs.extend(flatten(&p));
    let mut analytic = vec![Tensor::vector(dx), Tensor::vector(dh), Tensor::vector(dc)];
    analytic.extend(flatten(&grads));
    max_relative_error(&inputs, &analytic, DEFAULT_EPS, |xs| {
        let mut q = p.clone();
        set_params(&mut q, &xs[3..]);
        let (h2, c2, _) = lstm_cell(&q, &xs[0], &xs[1], &xs[2]).unwrap();
        h2.dot(&rh).unwrap() + c2.dot(&rc).unwrap()
    })
}

fn unroll_case(rng: &mut Rng) -> f64 {
    let (di, d, layers, t) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(2), 1 + rng.below(4));
    let params = RefinerParams::init(di, d, layers, t, rng).unwrap();
    let f = Tensor::uniform(&[di], 1.0, rng);
    // Some steps receive no gradient, as in the last-step and prefix modes.
    let probes: Vec<Option<Tensor>> = (0..t)
        .map(|_| (rng.below(4) != 0).then(|| Tensor::uniform(&[d], 1.0, rng)))
        .collect();
    let (_, ctx) = params.unroll(&f).unwrap();
    let mut grads = params.zeros_like();
    let df = ctx.backward(&probes, &params, &mut grads).unwrap();
    let mut inputs = vec![f];
    inputs.extend(flatten(&params));
    let mut analytic = vec![df];
    analytic.extend(flatten(&grads));
    max_relative_error(&inputs, &analytic, DEFAULT_EPS, |xs| {
        let mut p = params.clone();
        set_params(&mut p, &xs[1..]);
        let (hs, _) = p.unroll(&xs[0]).unwrap();
        hs.iter()
            .zip(&probes)
            .filter_map(|(h, r)| r.as_ref().map(|r| h.dot(r).unwrap()))
            .sum()
    })
}

fn attend_case(rng: &mut Rng) -> f64 {
    let (t, d) = (1 + rng.below(5), 1 + rng.below(4));
    let mut params = AttentionParams::init(t, d, rng.below(2) == 0, rng).unwrap();
    for w in &mut params.w {
        *w = w.scale(3.0);
    }
    let hs: Vec<Tensor> = (0..t).map(|_| Tensor::uniform(&[d], 1.0, rng)).collect();
    let probe = Tensor::uniform(&[d], 1.0, rng);
    let (_, ctx) = params.attend(&hs).unwrap();
    let mut grads = params.zeros_like();
    let dhs = ctx.backward(&probe, &params, &mut grads).unwrap();
    let mut inputs = hs.clone();
    inputs.extend(flatten(&params));
    let mut analytic = dhs;
    analytic.extend(flatten(&grads));
    max_relative_error(&inputs, &analytic, DEFAULT_EPS, |xs| {
        let mut p = params.clone();
        set_params(&mut p, &xs[t..]);
        let (out, _) = p.attend(&xs[..t]).unwrap();
        out.aggregate.dot(&probe).unwrap()
    })
}

fn sum_prefix_case(rng: &mut Rng) -> f64 {
    let (t, d) = (1 + rng.below(6), 1 + rng.below(4));
    let k = 1 + rng.below(t);
    let hs: Vec<Tensor> = (0..t).map(|_| Tensor::uniform(&[d], 1.0, rng)).collect();
    let probe = Tensor::uniform(&[d], 1.0, rng);
    let analytic: Vec<Tensor> = sum_prefix_backward(&probe, t, k)
        .into_iter()
        .map(|g| g.unwrap_or_else(|| Tensor::zeros(&[d])))
        .collect();
    max_relative_error(&hs, &analytic, DEFAULT_EPS, |xs| sum_prefix(xs, k).unwrap().dot(&probe).unwrap())
}

fn backbone_case(rng: &mut Rng) -> f64 {
    let params = BackboneParams::init(2, &[3, 4], rng).unwrap();
    let image = away_from_zero(&[1, 2, 8, 8], 1.0, rng);
    let probe = Tensor::uniform(&[1, 4], 1.0, rng);
    let (_, ctx) = params.extract_vector(&image).unwrap();
    let mut grads = params.zeros_like();
    let dimage = ctx.backward(&probe, &mut grads).unwrap();
    let mut inputs = vec![image];
    inputs.extend(flatten(&params));
    let mut analytic = vec![dimage];
    analytic.extend(flatten(&grads));
    max_relative_error(&inputs, &analytic, DEFAULT_EPS, |xs| {
        let mut p = params.clone();
        set_params(&mut p, &xs[1..]);
        p.extract_vector(&xs[0]).unwrap().0.dot(&probe).unwrap()
    })
}

pub fn tiny_config(mode: LocalMode) -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        widths: vec![3, 4],
        classes: 3,
        time_steps: 3,
        hidden: 4,
        lstm_layers: 2,
        shared_attention: false,
        mode,
    }
}

/// Joint loss on a two-sample batch, checked on 12 sampled coordinates
/// plus every attention and head-bias coordinate.
fn model_loss_case(mode: LocalMode) -> impl FnMut(&mut Rng) -> Option<f64> {
    move |rng| {
        let seed = rng.below(1 << 30) as u64;
        let model = TwoStreamModel::init(tiny_config(mode), seed).unwrap();
        let images: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[1, 2, 8, 8], 1.0, rng)).collect();
        let patches: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[1, 2, 8, 8], 1.0, rng)).collect();
        let labels = [rng.below(3), rng.below(3)];
        let weights = LossWeights::mirrored(rng.uniform(0.1, 2.0));
        let loss_of = |m: &TwoStreamModel| -> Result<f64> {
            let batch: Vec<Example> = (0..2)
                .map(|i| Example {
                    image: &images[i],
                    patch: &patches[i],
                    label: labels[i],
                })
                .collect();
            Ok(m.loss(&batch, &weights)?.0.total)
        };
        let batch: Vec<Example> = (0..2)
            .map(|i| Example {
                image: &images[i],
                patch: &patches[i],
                label: labels[i],
            })
            .collect();
        let (_, grads) = model.loss(&batch, &weights).unwrap();
        let named = model.named();
        let mut coords: Vec<(usize, usize)> = (0..12)
            .map(|_| {
                let ti = rng.below(named.len());
                (ti, rng.below(named[ti].1.len()))
            })
            .collect();
        for (ti, (name, t)) in named.iter().enumerate() {
            if name.contains("attention") || name.ends_with(".b") {
                coords.extend((0..t.len()).map(|j| (ti, j)));
            }
        }
        let mut worst = 0.0f64;
        for (ti, j) in coords {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.named_mut()[ti].1.data_mut()[j] += delta;
                loss_of(&m).unwrap()
            };
            let numeric = (eval(DEFAULT_EPS) - eval(-DEFAULT_EPS)) / (2.0 * DEFAULT_EPS);
            let a = grads.named()[ti].1.data()[j];
            if relative_error(a, numeric) > GRAD_TOL {
                // A relu kink within eps makes the difference quotient
                // itself scale-dependent; such draws are discarded.
                let fine = (eval(DEFAULT_EPS / 100.0) - eval(-DEFAULT_EPS / 100.0)) / (2.0 * DEFAULT_EPS / 100.0);
                if relative_error(numeric, fine) > GRAD_TOL {
                    return None;
                }
            }
            worst = worst.max(relative_error(a, numeric));
        }
        Some(worst)
    }
}

/// Every differentiable primitive and the joint loss under each local mode.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    vec![
        case("affine", repeat(r, affine_case)),
        case("conv2d", repeat(r, conv_case)),
        case("relu", repeat(r, activation_case(Activation::Relu))),
        case("sigmoid", repeat(r, activation_case(Activation::Sigmoid))),
        case("tanh", repeat(r, activation_case(Activation::Tanh))),
        case("gap", repeat(r, gap_case)),
        case("softmax", repeat(r, softmax_case)),
        case("softmax_cross_entropy", repeat(r, xent_case)),
        case("lstm_cell", repeat(r, cell_case)),
        case("unroll", repeat(r, unroll_case)),
        case("attend", repeat(r, attend_case)),
        case("sum_prefix", repeat(r, sum_prefix_case)),
        case("backbone", repeat(r, backbone_case)),
        case("loss/attention", repeat_smooth(r, model_loss_case(LocalMode::Attention))),
        case("loss/cnn_only", repeat_smooth(r, model_loss_case(LocalMode::CnnOnly))),
        case("loss/lstm_last", repeat_smooth(r, model_loss_case(LocalMode::LstmLast))),
        case("loss/sum", repeat_smooth(r, model_loss_case(LocalMode::Sum(2)))),
    ]
}
