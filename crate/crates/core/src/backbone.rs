//! Small stride-2 conv/relu stack producing a spatial feature map and its
//! pooled feature vector. Both streams own a separate instance.

use crate::error::{dim_err, invalid, Result};
use crate::params::{join, Parameters};
use crate::tensor::ops::{self, ActivationCtx, Conv2dCtx};
use crate::{Rng, Tensor};

pub const STRIDE: usize = 2;
pub const MIN_INPUT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<ConvLayer>,
}

impl BackboneParams {
    /// He-uniform kernels, zero biases. `widths` lists the output channels of
    /// each layer; the last entry is the feature width.
    pub fn init(in_channels: usize, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::build(in_channels, widths, |shape| {
            let fan_in = (shape[1] * 9) as f64;
            Tensor::uniform(shape, (6.0 / fan_in).sqrt(), rng)
        })
    }

    pub fn zeros(in_channels: usize, widths: &[usize]) -> Result<Self> {
        Self::build(in_channels, widths, Tensor::zeros)
    }

    fn build(
        in_channels: usize,
        widths: &[usize],
        mut kernel: impl FnMut(&[usize]) -> Tensor,
    ) -> Result<Self> {
        if in_channels == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(invalid!(
                "backbone needs positive channel widths, got in={in_channels}, widths={widths:?}"
            ));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for &c_out in widths {
            layers.push(ConvLayer {
                kernel: kernel(&[c_out, c_in, 3, 3]),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].kernel.shape()[1]
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().expect("at least one layer").kernel.shape()[0]
    }

    /// Spatial extent of the output map for an `h×w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers.iter().fold((h, w), |(h, w), _| {
            (
                ops::conv_output_extent(h, STRIDE),
                ops::conv_output_extent(w, STRIDE),
            )
        })
    }

    pub fn extract_map(&self, image: &Tensor) -> Result<(Tensor, MapCtx)> {
        image.expect_rank(4, "backbone")?;
        let s = image.shape();
        if s[0] != 1 || s[1] != self.in_channels() {
            return Err(dim_err!(
                "backbone expects [1×{}×H×W], got {s:?}",
                self.in_channels()
            ));
        }
        if s[2] < MIN_INPUT || s[3] < MIN_INPUT {
            return Err(dim_err!(
                "backbone input {}×{} below minimum {MIN_INPUT}×{MIN_INPUT}",
                s[2],
                s[3]
            ));
        }
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (z, conv) = ops::conv2d(&x, &layer.kernel, &layer.bias, STRIDE)?;
            let (a, act) = ops::relu(&z);
            stages.push((conv, act));
            x = a;
        }
        Ok((x, MapCtx { stages }))
    }

    pub fn extract_vector(&self, image: &Tensor) -> Result<(Tensor, VectorCtx)> {
        let (map, map_ctx) = self.extract_map(image)?;
        let (v, gap) = ops::gap(&map)?;
        Ok((v, VectorCtx { map, map_ctx, gap }))
    }
}

#[derive(Debug)]
pub struct MapCtx {
    stages: Vec<(Conv2dCtx, ActivationCtx)>,
}

impl MapCtx {
    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the input image.
    pub fn backward(self, grad_map: &Tensor, grads: &mut BackboneParams) -> Result<Tensor> {
        let mut g = grad_map.clone();
        for ((conv, act), layer) in self.stages.into_iter().zip(&mut grads.layers).rev() {
            let gz = act.backward(&g)?;
            let cg = conv.backward(&gz)?;
            layer.kernel.add_assign(&cg.k)?;
            layer.bias.add_assign(&cg.b)?;
            g = cg.x;
        }
        Ok(g)
    }
}

#[derive(Debug)]
pub struct VectorCtx {
    map: Tensor,
    map_ctx: MapCtx,
    gap: ops::GapCtx,
}

impl VectorCtx {
    /// The spatial map the vector was pooled from.
    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn backward(self, grad_vector: &Tensor, grads: &mut BackboneParams) -> Result<Tensor> {
        let gmap = self.gap.backward(grad_vector)?;
        self.map_ctx.backward(&gmap, grads)
    }
}

impl Parameters for BackboneParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((join(prefix, &format!("conv{i}.kernel")), &l.kernel));
            out.push((join(prefix, &format!("conv{i}.bias")), &l.bias));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((join(prefix, &format!("conv{i}.kernel")), &mut l.kernel));
            out.push((join(prefix, &format!("conv{i}.bias")), &mut l.bias));
        }
    }
}
