//! Central finite-difference verification of analytic gradients.

use super::{Rng, Tensor};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Largest relative error between `analytic[i]` and the central difference
/// of the scalar function `f` w.r.t. every element of `inputs[i]`.
pub fn max_relative_error<F>(inputs: &[Tensor], analytic: &[Tensor], eps: f64, mut f: F) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[i].shape(), "gradient shape for input {i}");
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = f(&probe);
            probe[i].data_mut()[j] = orig - eps;
            let minus = f(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    worst
}

/// Backward closure produced by a primitive under test: upstream gradient in,
/// one gradient per input out.
pub type Backward = Box<dyn FnOnce(&Tensor) -> Result<Vec<Tensor>>>;

/// Checks a tensor-valued primitive by contracting its output with a random
/// probe `r`, so the scalar objective is `sum(r * op(inputs))` and the
/// analytic gradient is `backward(r)`.
pub fn check_primitive<F>(inputs: &[Tensor], eps: f64, rng: &mut Rng, op: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(Tensor, Backward)>,
{
    let (out, backward) = op(inputs)?;
    let probe = Tensor::uniform(out.shape(), 1.0, rng);
    let analytic = backward(&probe)?;
    Ok(max_relative_error(inputs, &analytic, eps, |xs| {
        let (y, _) = op(xs).expect("forward succeeded once with these shapes");
        y.dot(&probe).expect("probe shaped like output")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn affine_op(xs: &[Tensor]) -> Result<(Tensor, Backward)> {
        let (y, ctx) = ops::affine(&xs[0], &xs[1], &xs[2])?;
        Ok((
            y,
            Box::new(move |g| {
                let gr = ctx.backward(g)?;
                Ok(vec![gr.x, gr.w, gr.b])
            }),
        ))
    }

    fn conv_op(stride: usize) -> impl Fn(&[Tensor]) -> Result<(Tensor, Backward)> {
        move |xs| {
            let (y, ctx) = ops::conv2d(&xs[0], &xs[1], &xs[2], stride)?;
            Ok((
                y,
                Box::new(move |g| {
                    let gr = ctx.backward(g)?;
                    Ok(vec![gr.x, gr.k, gr.b])
                }),
            ))
        }
    }

    fn act_op(kind: ops::Activation) -> impl Fn(&[Tensor]) -> Result<(Tensor, Backward)> {
        move |xs| {
            let (y, ctx) = ops::activate(kind, &xs[0]);
            Ok((y, Box::new(move |g| Ok(vec![ctx.backward(g)?]))))
        }
    }

    fn gap_op(xs: &[Tensor]) -> Result<(Tensor, Backward)> {
        let (y, ctx) = ops::gap(&xs[0])?;
        Ok((y, Box::new(move |g| Ok(vec![ctx.backward(g)?]))))
    }

    fn softmax_op(xs: &[Tensor]) -> Result<(Tensor, Backward)> {
        let (y, ctx) = ops::softmax(&xs[0])?;
        Ok((y, Box::new(move |g| Ok(vec![ctx.backward(g)?]))))
    }

    /// Values bounded away from zero so relu kinks are not straddled.
    fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::uniform(shape, 1.0, rng);
        for v in t.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        t
    }

    #[test]
    fn affine_gradients() {
        let mut rng = Rng::new(21);
        for _ in 0..10 {
            let xs = [
                Tensor::uniform(&[2, 3], 1.0, &mut rng),
                Tensor::uniform(&[3, 4], 1.0, &mut rng),
                Tensor::uniform(&[4], 1.0, &mut rng),
            ];
            let err = check_primitive(&xs, DEFAULT_EPS, &mut rng, affine_op).unwrap();
            assert!(err <= 1e-6, "affine {err}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = Rng::new(22);
        for i in 0..10 {
            let xs = [
                Tensor::uniform(&[1, 2, 5, 5], 1.0, &mut rng),
                Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng),
                Tensor::uniform(&[3], 1.0, &mut rng),
            ];
            let err = check_primitive(&xs, DEFAULT_EPS, &mut rng, conv_op(1 + i % 2)).unwrap();
            assert!(err <= 1e-6, "conv {err}");
        }
    }

    #[test]
    fn activation_gradients() {
        let mut rng = Rng::new(23);
        for kind in [ops::Activation::Relu, ops::Activation::Sigmoid, ops::Activation::Tanh] {
            for _ in 0..10 {
                let xs = [away_from_zero(&[3, 4], &mut rng).scale(3.0)];
                let err = check_primitive(&xs, DEFAULT_EPS, &mut rng, act_op(kind)).unwrap();
                assert!(err <= 1e-6, "{kind:?} {err}");
            }
        }
    }

    #[test]
    fn gap_gradients() {
        let mut rng = Rng::new(24);
        for _ in 0..10 {
            let xs = [Tensor::uniform(&[2, 3, 4, 3], 1.0, &mut rng)];
            let err = check_primitive(&xs, DEFAULT_EPS, &mut rng, gap_op).unwrap();
            assert!(err <= 1e-8, "gap {err}");
        }
    }

    #[test]
    fn softmax_gradients() {
        let mut rng = Rng::new(25);
        for _ in 0..10 {
            let xs = [Tensor::uniform(&[2, 5], 2.0, &mut rng)];
            let err = check_primitive(&xs, DEFAULT_EPS, &mut rng, softmax_op).unwrap();
            assert!(err <= 1e-6, "softmax {err}");
        }
    }

    #[test]
    fn fused_xent_gradient() {
        let mut rng = Rng::new(26);
        for _ in 0..10 {
            let logits = Tensor::uniform(&[3, 4], 2.0, &mut rng);
            let labels = [rng.below(4), rng.below(4), rng.below(4)];
            let (_, _, ctx) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
            let g = ctx.backward(1.0);
            let err = max_relative_error(&[logits], &[g], DEFAULT_EPS, |xs| {
                ops::softmax_cross_entropy(&xs[0], &labels).unwrap().0
            });
            assert!(err <= 1e-6, "xent {err}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::vector(vec![0.3, -0.2]);
        let wrong = Tensor::vector(vec![1.0, 1.0]);
        let err = max_relative_error(&[x], &[wrong], DEFAULT_EPS, |xs| {
            xs[0].data().iter().map(|v| v * v).sum()
        });
        assert!(err > 0.5);
    }
}
