//! Stacked uni-directional LSTM fed the same feature vector at every step.
//! Step `t`'s output is the top layer's hidden state after `t` updates.

use crate::error::{dim_err, invalid, Result};
use crate::params::{join, Parameters};
use crate::tensor::ops::sigmoid_scalar;
use crate::{Rng, Tensor};

/// Gate order used throughout: input, forget, candidate, output.
pub const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// Input-to-gate weights `[D_in×D]`, one per gate.
    pub w_input: [Tensor; 4],
    /// Hidden-to-gate weights `[D×D]`, one per gate.
    pub w_hidden: [Tensor; 4],
    pub bias: [Tensor; 4],
}

impl LstmLayerParams {
    /// Uniform(−1/√D, 1/√D) weights; zero biases except forget = +1.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = std::array::from_fn(|_| Tensor::uniform(&[input, hidden], bound, rng));
        let w_hidden = std::array::from_fn(|_| Tensor::uniform(&[hidden, hidden], bound, rng));
        let mut bias: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[hidden]));
        bias[1] = Tensor::full(&[hidden], 1.0);
        Self {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: std::array::from_fn(|_| Tensor::zeros(&[input, hidden])),
            w_hidden: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            bias: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input[0].shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_input[0].shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let (di, d) = (self.input_size(), self.hidden_size());
        for k in 0..4 {
            if self.w_input[k].shape() != [di, d]
                || self.w_hidden[k].shape() != [d, d]
                || self.bias[k].shape() != [d]
            {
                return Err(dim_err!(
                    "lstm gate {} shapes inconsistent with ({di}, {d})",
                    GATES[k]
                ));
            }
        }
        Ok(())
    }
}

/// Accumulates `v[D_rows] · m[D_rows×D]` into `out[D]`.
fn vec_mat_acc(v: &[f64], m: &[f64], out: &mut [f64]) {
    let d = out.len();
    for (r, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(&m[r * d..(r + 1) * d]) {
            *o += x * w;
        }
    }
}

/// Accumulates `m[D_rows×D] · g[D]` into `out[D_rows]`.
fn mat_vec_acc(m: &[f64], g: &[f64], out: &mut [f64]) {
    let d = g.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += m[r * d..(r + 1) * d].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn outer_acc(a: &[f64], g: &[f64], out: &mut [f64]) {
    let d = g.len();
    for (r, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &gv) in out[r * d..(r + 1) * d].iter_mut().zip(g) {
            *o += x * gv;
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellCtx {
    x: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    /// Post-activation gate values in `GATES` order.
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

/// One LSTM update: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell(
    p: &LstmLayerParams,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, Tensor, CellCtx)> {
    p.validate()?;
    let (di, d) = (p.input_size(), p.hidden_size());
    if x.len() != di || h.len() != d || c.len() != d {
        return Err(dim_err!(
            "lstm_cell expects x[{di}], h[{d}], c[{d}]; got {:?}, {:?}, {:?}",
            x.shape(),
            h.shape(),
            c.shape()
        ));
    }
    let gates: [Vec<f64>; 4] = std::array::from_fn(|k| {
        let mut pre = p.bias[k].data().to_vec();
        vec_mat_acc(x.data(), p.w_input[k].data(), &mut pre);
        vec_mat_acc(h.data(), p.w_hidden[k].data(), &mut pre);
        if k == 2 {
            pre.iter().map(|v| v.tanh()).collect()
        } else {
            pre.iter().map(|&v| sigmoid_scalar(v)).collect()
        }
    });
    let [i, f, g, o] = &gates;
    let c_new: Vec<f64> = (0..d).map(|j| f[j] * c.data()[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..d).map(|j| o[j] * tanh_c[j]).collect();
    let ctx = CellCtx {
        x: x.data().to_vec(),
        h: h.data().to_vec(),
        c: c.data().to_vec(),
        gates,
        tanh_c,
    };
    Ok((Tensor::vector(h_new), Tensor::vector(c_new), ctx))
}

impl CellCtx {
    /// Given gradients w.r.t. `h'` and `c'`, accumulates parameter gradients
    /// and returns `(dx, dh, dc)`.
    pub fn backward(
        self,
        dh_new: &[f64],
        dc_new: &[f64],
        p: &LstmLayerParams,
        grads: &mut LstmLayerParams,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.tanh_c.len();
        let [i, f, g, o] = &self.gates;
        let mut dpre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d]);
        let mut dc = vec![0.0; d];
        for j in 0..d {
            let dct = dc_new[j] + dh_new[j] * o[j] * (1.0 - self.tanh_c[j] * self.tanh_c[j]);
            dpre[3][j] = dh_new[j] * self.tanh_c[j] * o[j] * (1.0 - o[j]);
            dpre[0][j] = dct * g[j] * i[j] * (1.0 - i[j]);
            dpre[1][j] = dct * self.c[j] * f[j] * (1.0 - f[j]);
            dpre[2][j] = dct * i[j] * (1.0 - g[j] * g[j]);
            dc[j] = dct * f[j];
        }
        let mut dx = vec![0.0; self.x.len()];
        let mut dh = vec![0.0; d];
        for k in 0..4 {
            outer_acc(&self.x, &dpre[k], grads.w_input[k].data_mut());
            outer_acc(&self.h, &dpre[k], grads.w_hidden[k].data_mut());
            for (b, v) in grads.bias[k].data_mut().iter_mut().zip(&dpre[k]) {
                *b += v;
            }
            mat_vec_acc(p.w_input[k].data(), &dpre[k], &mut dx);
            mat_vec_acc(p.w_hidden[k].data(), &dpre[k], &mut dh);
        }
        (dx, dh, dc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub layers: Vec<LstmLayerParams>,
    pub time_steps: usize,
}

impl RefinerParams {
    pub fn init(
        input: usize,
        hidden: usize,
        num_layers: usize,
        time_steps: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(input, hidden, num_layers, time_steps, |i, h| {
            LstmLayerParams::init(i, h, rng)
        })
    }

    pub fn zeros(input: usize, hidden: usize, num_layers: usize, time_steps: usize) -> Result<Self> {
        Self::build(input, hidden, num_layers, time_steps, LstmLayerParams::zeros)
    }

    fn build(
        input: usize,
        hidden: usize,
        num_layers: usize,
        time_steps: usize,
        mut layer: impl FnMut(usize, usize) -> LstmLayerParams,
    ) -> Result<Self> {
        if num_layers == 0 || hidden == 0 || input == 0 {
            return Err(invalid!(
                "refiner needs positive sizes, got input={input}, hidden={hidden}, layers={num_layers}"
            ));
        }
        if time_steps == 0 {
            return Err(invalid!("refiner needs at least one time step"));
        }
        let layers = (0..num_layers)
            .map(|l| layer(if l == 0 { input } else { hidden }, hidden))
            .collect();
        Ok(Self { layers, time_steps })
    }

    pub fn hidden_size(&self) -> usize {
        self.layers.last().expect("non-empty").hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    fn validate(&self) -> Result<()> {
        if self.time_steps == 0 {
            return Err(invalid!("refiner needs at least one time step"));
        }
        if self.layers.is_empty() {
            return Err(invalid!("refiner has no layers"));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input_size() != pair[0].hidden_size() {
                return Err(dim_err!(
                    "lstm layer {} input {} != layer {} hidden {}",
                    l + 1,
                    pair[1].input_size(),
                    l,
                    pair[0].hidden_size()
                ));
            }
        }
        Ok(())
    }

    /// Runs `time_steps` updates with the same input `f` at every step and
    /// returns the top layer's hidden state after each.
    pub fn unroll(&self, f: &Tensor) -> Result<(Vec<Tensor>, UnrollCtx)> {
        self.validate()?;
        if f.len() != self.input_size() {
            return Err(dim_err!(
                "refiner input has {} elements, expected {}",
                f.len(),
                self.input_size()
            ));
        }
        let f = Tensor::vector(f.data().to_vec());
        let mut state: Vec<(Tensor, Tensor)> = self
            .layers
            .iter()
            .map(|l| {
                let d = l.hidden_size();
                (Tensor::zeros(&[d]), Tensor::zeros(&[d]))
            })
            .collect();
        let mut outputs = Vec::with_capacity(self.time_steps);
        let mut cells = Vec::with_capacity(self.time_steps);
        for _ in 0..self.time_steps {
            let mut step = Vec::with_capacity(self.layers.len());
            let mut input = f.clone();
            for (layer, (h, c)) in self.layers.iter().zip(state.iter_mut()) {
                let (h2, c2, ctx) = lstm_cell(layer, &input, h, c)?;
                step.push(ctx);
                *h = h2.clone();
                *c = c2;
                input = h2;
            }
            outputs.push(input);
            cells.push(step);
        }
        Ok((outputs, UnrollCtx { cells }))
    }
}

#[derive(Debug)]
pub struct UnrollCtx {
    /// `cells[t][layer]`.
    cells: Vec<Vec<CellCtx>>,
}

impl UnrollCtx {
    /// Backpropagation through time. `grad_outputs[t]` is the gradient w.r.t.
    /// step `t`'s output (`None` for zero). Returns the gradient w.r.t. the
    /// shared input, summed over every step.
    pub fn backward(
        self,
        grad_outputs: &[Option<Tensor>],
        params: &RefinerParams,
        grads: &mut RefinerParams,
    ) -> Result<Tensor> {
        let steps = self.cells.len();
        if grad_outputs.len() != steps {
            return Err(dim_err!(
                "unroll backward expects {steps} step gradients, got {}",
                grad_outputs.len()
            ));
        }
        let d_top = params.hidden_size();
        let mut dh_next: Vec<Vec<f64>> =
            params.layers.iter().map(|l| vec![0.0; l.hidden_size()]).collect();
        let mut dc_next = dh_next.clone();
        let mut df = vec![0.0; params.input_size()];
        for (t, step) in self.cells.into_iter().enumerate().rev() {
            let mut from_above = match &grad_outputs[t] {
                Some(g) => {
                    if g.len() != d_top {
                        return Err(dim_err!(
                            "step {t} gradient has {} elements, expected {d_top}",
                            g.len()
                        ));
                    }
                    g.data().to_vec()
                }
                None => vec![0.0; d_top],
            };
            for (l, cell) in step.into_iter().enumerate().rev() {
                let dh_total: Vec<f64> = dh_next[l]
                    .iter()
                    .zip(&from_above)
                    .map(|(a, b)| a + b)
                    .collect();
                let (dx, dh, dc) =
                    cell.backward(&dh_total, &dc_next[l], &params.layers[l], &mut grads.layers[l]);
                dh_next[l] = dh;
                dc_next[l] = dc;
                if l == 0 {
                    for (a, b) in df.iter_mut().zip(&dx) {
                        *a += b;
                    }
                } else {
                    from_above = dx;
                }
            }
        }
        Ok(Tensor::vector(df))
    }
}

impl Parameters for LstmLayerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (k, gate) in GATES.iter().enumerate() {
            out.push((join(prefix, &format!("w_i{gate}")), &self.w_input[k]));
            out.push((join(prefix, &format!("w_h{gate}")), &self.w_hidden[k]));
            out.push((join(prefix, &format!("b_{gate}")), &self.bias[k]));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let LstmLayerParams {
            w_input,
            w_hidden,
            bias,
        } = self;
        for (k, ((wi, wh), b)) in w_input
            .iter_mut()
            .zip(w_hidden.iter_mut())
            .zip(bias.iter_mut())
            .enumerate()
        {
            let gate = GATES[k];
            out.push((join(prefix, &format!("w_i{gate}")), wi));
            out.push((join(prefix, &format!("w_h{gate}")), wh));
            out.push((join(prefix, &format!("b_{gate}")), b));
        }
    }
}

impl Parameters for RefinerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("lstm{l}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("lstm{l}")), out);
        }
    }
}
