//! Differentiable primitives. Each forward returns `(output, ctx)`; the
//! context's `backward` consumes it and maps an upstream gradient to
//! gradients for the inputs.

use super::Tensor;
use crate::error::{dim_err, invalid, Result};

/// Probability floor inside the log of cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------- affine

#[derive(Debug)]
pub struct AffineCtx {
    x: Tensor,
    w: Tensor,
}

#[derive(Debug)]
pub struct AffineGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

/// `out[n, j] = sum_a x[n, a] * w[a, j] + b[j]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, AffineCtx)> {
    let (n, a, bdim) = affine_dims(x, w, b)?;
    let xs = x.data();
    let ws = w.data();
    let mut out = Vec::with_capacity(n * bdim);
    for row in 0..n {
        let mut acc = b.data().to_vec();
        let xrow = &xs[row * a..(row + 1) * a];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &ws[k * bdim..(k + 1) * bdim];
            for (o, &wv) in acc.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        out.extend_from_slice(&acc);
    }
    Ok((
        Tensor::from_parts(vec![n, bdim], out),
        AffineCtx {
            x: x.clone(),
            w: w.clone(),
        },
    ))
}

fn affine_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(dim_err!(
            "affine expects x[N×A], w[A×B], b[B]; got x{:?}, w{:?}, b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (n, a) = (x.shape()[0], x.shape()[1]);
    let (wa, wb) = (w.shape()[0], w.shape()[1]);
    if a != wa || b.shape()[0] != wb {
        return Err(dim_err!(
            "affine inner dimensions disagree: x{:?}, w{:?}, b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    Ok((n, a, wb))
}

impl AffineCtx {
    pub fn backward(self, grad: &Tensor) -> Result<AffineGrads> {
        let (n, a) = (self.x.shape()[0], self.x.shape()[1]);
        let bdim = self.w.shape()[1];
        if grad.shape() != [n, bdim] {
            return Err(dim_err!(
                "affine backward expects grad [{n}, {bdim}], got {:?}",
                grad.shape()
            ));
        }
        let (xs, ws, gs) = (self.x.data(), self.w.data(), grad.data());
        let mut dx = vec![0.0; n * a];
        let mut dw = vec![0.0; a * bdim];
        let mut db = vec![0.0; bdim];
        for row in 0..n {
            let grow = &gs[row * bdim..(row + 1) * bdim];
            for (d, g) in db.iter_mut().zip(grow) {
                *d += g;
            }
            for k in 0..a {
                let wrow = &ws[k * bdim..(k + 1) * bdim];
                dx[row * a + k] = wrow.iter().zip(grow).map(|(w, g)| w * g).sum();
                let xv = xs[row * a + k];
                if xv != 0.0 {
                    for (d, g) in dw[k * bdim..(k + 1) * bdim].iter_mut().zip(grow) {
                        *d += xv * g;
                    }
                }
            }
        }
        Ok(AffineGrads {
            x: Tensor::from_parts(vec![n, a], dx),
            w: Tensor::from_parts(vec![a, bdim], dw),
            b: Tensor::from_parts(vec![bdim], db),
        })
    }
}

// ---------------------------------------------------------------- conv2d

pub const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Debug)]
pub struct Conv2dCtx {
    x: Tensor,
    k: Tensor,
    stride: usize,
    out_hw: (usize, usize),
}

#[derive(Debug)]
pub struct Conv2dGrads {
    pub x: Tensor,
    pub k: Tensor,
    pub b: Tensor,
}

pub fn conv_output_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// 3×3 cross-correlation with zero padding 1.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<(Tensor, Conv2dCtx)> {
    if x.rank() != 4 || k.rank() != 4 || b.rank() != 1 {
        return Err(dim_err!(
            "conv2d expects x[N×C×H×W], k[O×C×3×3], b[O]; got x{:?}, k{:?}, b{:?}",
            x.shape(),
            k.shape(),
            b.shape()
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(invalid!("conv2d stride must be 1 or 2, got {stride}"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kh != KERNEL || kw != KERNEL || kc != c || b.shape()[0] != o {
        return Err(dim_err!(
            "conv2d kernel {:?} / bias {:?} incompatible with input {:?}",
            k.shape(),
            b.shape(),
            x.shape()
        ));
    }
    if h + 2 * PAD < KERNEL || w + 2 * PAD < KERNEL {
        return Err(dim_err!(
            "conv2d kernel 3×3 larger than padded input {:?}",
            x.shape()
        ));
    }
    let (oh, ow) = (conv_output_extent(h, stride), conv_output_extent(w, stride));
    let (ph, pw) = (h + 2 * PAD, w + 2 * PAD);
    let padded = pad(x.data(), n * c, h, w);
    let ks = k.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            let base = (ni * o + oc) * oh * ow;
            let oplane = &mut out[base..base + oh * ow];
            oplane.fill(b.data()[oc]);
            for ic in 0..c {
                let xplane = &padded[(ni * c + ic) * ph * pw..(ni * c + ic + 1) * ph * pw];
                let kern = &ks[(oc * c + ic) * 9..(oc * c + ic + 1) * 9];
                for oy in 0..oh {
                    let rows = [
                        &xplane[(oy * stride) * pw..],
                        &xplane[(oy * stride + 1) * pw..],
                        &xplane[(oy * stride + 2) * pw..],
                    ];
                    for ox in 0..ow {
                        let x0 = ox * stride;
                        let mut acc = 0.0;
                        for (ky, row) in rows.iter().enumerate() {
                            acc += kern[ky * 3] * row[x0];
                            acc += kern[ky * 3 + 1] * row[x0 + 1];
                            acc += kern[ky * 3 + 2] * row[x0 + 2];
                        }
                        oplane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, o, oh, ow], out),
        Conv2dCtx {
            x: x.clone(),
            k: k.clone(),
            stride,
            out_hw: (oh, ow),
        },
    ))
}

/// Copies `planes` planes of `h×w` into zero-bordered `(h+2)×(w+2)` planes.
fn pad(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * PAD, w + 2 * PAD);
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let dst = (p * ph + y + PAD) * pw + PAD;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

fn unpad(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * PAD, w + 2 * PAD);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let src = (p * ph + y + PAD) * pw + PAD;
            out.extend_from_slice(&x[src..src + w]);
        }
    }
    out
}

impl Conv2dCtx {
    pub fn backward(self, grad: &Tensor) -> Result<Conv2dGrads> {
        let (n, c, h, w) = {
            let s = self.x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let o = self.k.shape()[0];
        let (oh, ow) = self.out_hw;
        if grad.shape() != [n, o, oh, ow] {
            return Err(dim_err!(
                "conv2d backward expects grad {:?}, got {:?}",
                [n, o, oh, ow],
                grad.shape()
            ));
        }
        let stride = self.stride;
        let (ph, pw) = (h + 2 * PAD, w + 2 * PAD);
        let padded = pad(self.x.data(), n * c, h, w);
        let (ks, gs) = (self.k.data(), grad.data());
        let mut dpad = vec![0.0; padded.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut db = vec![0.0; o];
        for ni in 0..n {
            for oc in 0..o {
                let gplane = &gs[(ni * o + oc) * oh * ow..(ni * o + oc + 1) * oh * ow];
                db[oc] += gplane.iter().sum::<f64>();
                for ic in 0..c {
                    let poff = (ni * c + ic) * ph * pw;
                    let koff = (oc * c + ic) * 9;
                    let kern = &ks[koff..koff + 9];
                    let mut dkern = [0.0; 9];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gplane[oy * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..KERNEL {
                                let row = poff + (oy * stride + ky) * pw + ox * stride;
                                for kx in 0..KERNEL {
                                    dkern[ky * 3 + kx] += g * padded[row + kx];
                                    dpad[row + kx] += g * kern[ky * 3 + kx];
                                }
                            }
                        }
                    }
                    for (d, v) in dk[koff..koff + 9].iter_mut().zip(dkern) {
                        *d += v;
                    }
                }
            }
        }
        let dx = unpad(&dpad, n * c, h, w);
        Ok(Conv2dGrads {
            x: Tensor::from_parts(self.x.shape().to_vec(), dx),
            k: Tensor::from_parts(self.k.shape().to_vec(), dk),
            b: Tensor::from_parts(vec![o], db),
        })
    }
}

// ---------------------------------------------------------------- elementwise

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid_scalar(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
pub struct ActivationCtx {
    kind: Activation,
    y: Tensor,
}

pub fn activate(kind: Activation, x: &Tensor) -> (Tensor, ActivationCtx) {
    let y = x.map(|v| kind.apply(v));
    (y.clone(), ActivationCtx { kind, y })
}

pub fn relu(x: &Tensor) -> (Tensor, ActivationCtx) {
    activate(Activation::Relu, x)
}

pub fn sigmoid(x: &Tensor) -> (Tensor, ActivationCtx) {
    activate(Activation::Sigmoid, x)
}

pub fn tanh(x: &Tensor) -> (Tensor, ActivationCtx) {
    activate(Activation::Tanh, x)
}

impl ActivationCtx {
    pub fn backward(self, grad: &Tensor) -> Result<Tensor> {
        self.y.expect_same_shape(grad)?;
        let kind = self.kind;
        let data = self
            .y
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| g * kind.derivative_from_output(y))
            .collect();
        Ok(Tensor::from_parts(self.y.shape().to_vec(), data))
    }
}

// ---------------------------------------------------------------- gap

#[derive(Debug)]
pub struct GapCtx {
    shape: Vec<usize>,
}

/// Spatial mean: `[N×C×H×W] -> [N×C]`.
pub fn gap(x: &Tensor) -> Result<(Tensor, GapCtx)> {
    x.expect_rank(4, "gap")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let area = (h * w) as f64;
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Ok((
        Tensor::from_parts(vec![n, c], out),
        GapCtx {
            shape: x.shape().to_vec(),
        },
    ))
}

impl GapCtx {
    pub fn backward(self, grad: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if grad.shape() != [n, c] {
            return Err(dim_err!(
                "gap backward expects grad [{n}, {c}], got {:?}",
                grad.shape()
            ));
        }
        let area = (h * w) as f64;
        let mut dx = Vec::with_capacity(n * c * h * w);
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g / area, h * w));
        }
        Ok(Tensor::from_parts(self.shape, dx))
    }
}

// ---------------------------------------------------------------- softmax / xent

#[derive(Debug)]
pub struct SoftmaxCtx {
    y: Tensor,
}

fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= total;
    }
}

/// Row-wise softmax over `[N×C]`, stabilised by max subtraction.
pub fn softmax(x: &Tensor) -> Result<(Tensor, SoftmaxCtx)> {
    x.expect_rank(2, "softmax")?;
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        softmax_row(row, &mut out);
    }
    let y = Tensor::from_parts(x.shape().to_vec(), out);
    Ok((y.clone(), SoftmaxCtx { y }))
}

impl SoftmaxCtx {
    pub fn backward(self, grad: &Tensor) -> Result<Tensor> {
        self.y.expect_same_shape(grad)?;
        let c = self.y.shape()[1];
        let mut dx = Vec::with_capacity(self.y.len());
        for (y, g) in self.y.data().chunks_exact(c).zip(grad.data().chunks_exact(c)) {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            dx.extend(y.iter().zip(g).map(|(yv, gv)| yv * (gv - dot)));
        }
        Ok(Tensor::from_parts(self.y.shape().to_vec(), dx))
    }
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(invalid!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(invalid!("label {l} at row {i} outside [0, {c})"));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    probs.expect_rank(2, "cross_entropy")?;
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    check_labels(labels, n, c)?;
    let mut total = 0.0;
    for (i, row) in probs.data().chunks_exact(c).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
            return Err(invalid!("probability row {i} is not a distribution (sum {s})"));
        }
        total -= row[labels[i]].max(PROB_FLOOR).ln();
    }
    Ok(total / n as f64)
}

#[derive(Debug)]
pub struct SoftmaxXentCtx {
    probs: Tensor,
    labels: Vec<usize>,
}

/// Fused softmax + cross-entropy on logits. Returns the mean loss and the
/// probabilities; the backward pass is `(probs - one_hot) / N`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor, SoftmaxXentCtx)> {
    logits.expect_rank(2, "softmax_cross_entropy")?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, n, c)?;
    let (probs, _) = softmax(logits)?;
    let loss = cross_entropy(&probs, labels)?;
    Ok((
        loss,
        probs.clone(),
        SoftmaxXentCtx {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

impl SoftmaxXentCtx {
    /// Gradient w.r.t. the logits, scaled by the upstream scalar gradient.
    pub fn backward(self, upstream: f64) -> Tensor {
        let (n, c) = (self.probs.shape()[0], self.probs.shape()[1]);
        let scale = upstream / n as f64;
        let mut g = self.probs.into_data();
        for (i, &l) in self.labels.iter().enumerate() {
            g[i * c + l] -= 1.0;
        }
        for v in &mut g {
            *v *= scale;
        }
        Tensor::from_parts(vec![n, c], g)
    }
}
