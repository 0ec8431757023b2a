//! Layer implementations. Every layer caches what its backward pass needs
//! during `forward` and accumulates parameter gradients in `backward`.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{gemm, Tensor};

/// Batch items handled per parallel task. Fixed, so reductions happen in the
/// same order whatever the thread count.
const CHUNK: usize = 4;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; batchnorm uses batch statistics and updates its
    /// running averages.
    Train,
    /// Training arithmetic without dropout or running-stat updates; used by
    /// gradient checks.
    Check,
    /// Dropout off; batchnorm uses running statistics.
    Infer,
}

/// A named parameter block with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running statistics are stored as non-trainable blocks.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
            trainable,
        }
    }

    fn he_uniform(name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Param::new(name, shape, value, true)
    }

    fn uniform(name: &str, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Param::new(name, shape, value, true)
    }

    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![0.0; n], true)
    }

    fn filled(name: &str, shape: Vec<usize>, v: f64, trainable: bool) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![v; n], trainable)
    }
}

pub(crate) trait Layer: Send + Sync {
    /// Consumes the input so elementwise layers can work in place.
    fn forward(&mut self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor;
    /// Gradient w.r.t. the layer input; parameter gradients are accumulated.
    fn backward(&mut self, grad: Tensor) -> Tensor;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

fn chunks(batch: usize) -> Vec<Range<usize>> {
    (0..batch.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(batch))
        .collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image into a `[C*k*k, OH*OW]` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let area = self.out_area();
        let mut cols = vec![0.0; self.patch() * area];
        for c in 0..self.in_c {
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = ((c * self.k + i) * self.k + j) * area;
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = (c * self.h + y as usize) * self.w;
                        for ox in 0..self.ow {
                            let x_ = (ox * self.stride + j) as isize - self.pad as isize;
                            if x_ >= 0 && x_ < self.w as isize {
                                cols[row + oy * self.ow + ox] = x[src + x_ as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a `[C*k*k, OH*OW]` gradient back onto the image.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let area = self.out_area();
        for c in 0..self.in_c {
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = ((c * self.k + i) * self.k + j) * area;
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = (c * self.h + y as usize) * self.w;
                        for ox in 0..self.ow {
                            let x_ = (ox * self.stride + j) as isize - self.pad as isize;
                            if x_ >= 0 && x_ < self.w as isize {
                                dx[dst + x_ as usize] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct Conv2d {
    geom: ConvGeom,
    out_c: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub(crate) fn new(
        prefix: &str,
        in_shape: &[usize],
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (in_c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let geom = ConvGeom {
            in_c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        Conv2d {
            geom,
            out_c,
            weight: Param::he_uniform(
                &format!("{prefix}.weight"),
                vec![out_c, in_c, k, k],
                geom.patch(),
                rng,
            ),
            bias: Param::zeros(&format!("{prefix}.bias"), vec![out_c]),
            input: None,
        }
    }

    fn out_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.out_c, self.geom.oh, self.geom.ow]
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let g = self.geom;
        let area = g.out_area();
        let (w, b, out_c) = (&self.weight.value, &self.bias.value, self.out_c);
        let item = out_c * area;
        let mut y = vec![0.0; x.batch() * item];
        y.par_chunks_mut(CHUNK * item).enumerate().for_each(|(c, part)| {
            for (slot, out) in part.chunks_mut(item).enumerate() {
                for (f, row) in out.chunks_mut(area).enumerate() {
                    row.fill(b[f]);
                }
                let cols = g.im2col(x.item(c * CHUNK + slot));
                gemm(false, false, out_c, area, g.patch(), 1.0, w, &cols, 1.0, out);
            }
        });
        let shape = self.out_shape(x.batch());
        self.input = Some(x);
        Tensor::new(shape, y).expect("conv output shape")
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.input.as_ref().expect("conv backward before forward");
        let g = self.geom;
        let area = g.out_area();
        let (w, out_c) = (&self.weight.value, self.out_c);
        let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = chunks(x.batch())
            .into_par_iter()
            .map(|r| {
                let mut dw = vec![0.0; out_c * g.patch()];
                let mut db = vec![0.0; out_c];
                let mut dx = vec![0.0; r.len() * x.item_len()];
                for (slot, bi) in r.enumerate() {
                    let cols = g.im2col(x.item(bi));
                    let gy = grad.item(bi);
                    gemm(false, true, out_c, g.patch(), area, 1.0, gy, &cols, 1.0, &mut dw);
                    for f in 0..out_c {
                        db[f] += gy[f * area..(f + 1) * area].iter().sum::<f64>();
                    }
                    let mut dcols = vec![0.0; g.patch() * area];
                    gemm(true, false, g.patch(), area, out_c, 1.0, w, gy, 0.0, &mut dcols);
                    let n = x.item_len();
                    g.col2im(&dcols, &mut dx[slot * n..(slot + 1) * n]);
                }
                (dw, db, dx)
            })
            .collect();
        let mut dx = Vec::with_capacity(x.data().len());
        for (dw, db, part) in parts {
            add_into(&mut self.weight.grad, &dw);
            add_into(&mut self.bias.grad, &db);
            dx.extend(part);
        }
        Tensor::new(x.shape().to_vec(), dx).expect("conv grad shape")
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Pooling

pub(crate) struct MaxPool2x2 {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2x2 {
    pub(crate) fn new() -> Self {
        MaxPool2x2 {
            argmax: Vec::new(),
            in_shape: Vec::new(),
        }
    }
}

impl Layer for MaxPool2x2 {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let d = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.argmax = argmax;
        self.in_shape = x.shape().to_vec();
        Tensor::new(vec![b, c, oh, ow], out).expect("pool shape")
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.in_shape.clone());
        let d = dx.data_mut();
        for (g, &i) in grad.data().iter().zip(&self.argmax) {
            d[i] += g;
        }
        dx
    }
}

pub(crate) struct GlobalAvgPool {
    in_shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub(crate) fn new() -> Self {
        GlobalAvgPool { in_shape: Vec::new() }
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let area = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        self.in_shape = x.shape().to_vec();
        Tensor::new(vec![b, c], out).expect("gap shape")
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let area = self.in_shape[2] * self.in_shape[3];
        let data = grad
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat(g / area as f64).take(area))
            .collect();
        Tensor::new(self.in_shape.clone(), data).expect("gap grad shape")
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

pub(crate) struct BatchNorm {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    used_batch_stats: bool,
    in_shape: Vec<usize>,
}

impl BatchNorm {
    pub(crate) fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(&format!("{prefix}.gamma"), vec![channels], 1.0, true),
            beta: Param::filled(&format!("{prefix}.beta"), vec![channels], 0.0, true),
            running_mean: Param::filled(&format!("{prefix}.running_mean"), vec![channels], 0.0, false),
            running_var: Param::filled(&format!("{prefix}.running_var"), vec![channels], 1.0, false),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            used_batch_stats: false,
            in_shape: Vec::new(),
        }
    }

    /// Spatial extent per channel: 1 for vectors, H*W for images.
    fn area(shape: &[usize]) -> usize {
        shape[2..].iter().product()
    }

    fn each_channel(&self, shape: &[usize], mut f: impl FnMut(usize, usize)) {
        // Calls f(flat_index, channel) for every element.
        let (b, area) = (shape[0], Self::area(shape));
        for bi in 0..b {
            for c in 0..self.channels {
                let base = (bi * self.channels + c) * area;
                for i in base..base + area {
                    f(i, c);
                }
            }
        }
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: Tensor, mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let shape = x.shape().to_vec();
        let n = (shape[0] * Self::area(&shape)) as f64;
        let d = x.data();
        let (mean, var) = if mode == Mode::Infer {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        } else {
            let mut mean = vec![0.0; self.channels];
            self.each_channel(&shape, |i, c| mean[c] += d[i]);
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; self.channels];
            self.each_channel(&shape, |i, c| var[c] += (d[i] - mean[c]).powi(2));
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        };
        if mode == Mode::Train {
            for c in 0..self.channels {
                let rm = &mut self.running_mean.value[c];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[c];
                let rv = &mut self.running_var.value[c];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[c];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        let (gamma, beta) = (&self.gamma.value, &self.beta.value);
        self.each_channel(&shape, |i, c| {
            xhat[i] = (d[i] - mean[c]) * inv_std[c];
            out[i] = gamma[c] * xhat[i] + beta[c];
        });
        self.xhat = xhat;
        self.inv_std = inv_std;
        self.used_batch_stats = mode != Mode::Infer;
        self.in_shape = shape.clone();
        Tensor::new(shape, out).expect("bn shape")
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let shape = self.in_shape.clone();
        let n = (shape[0] * Self::area(&shape)) as f64;
        let g = grad.data();
        let mut sum_g = vec![0.0; self.channels];
        let mut sum_gx = vec![0.0; self.channels];
        let xhat = &self.xhat;
        self.each_channel(&shape, |i, c| {
            sum_g[c] += g[i];
            sum_gx[c] += g[i] * xhat[i];
        });
        add_into(&mut self.gamma.grad, &sum_gx);
        add_into(&mut self.beta.grad, &sum_g);

        let mut dx = vec![0.0; g.len()];
        let (gamma, inv_std) = (&self.gamma.value, &self.inv_std);
        if self.used_batch_stats {
            self.each_channel(&shape, |i, c| {
                dx[i] = gamma[c] * inv_std[c] / n * (n * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
            });
        } else {
            self.each_channel(&shape, |i, c| dx[i] = gamma[c] * inv_std[c] * g[i]);
        }
        Tensor::new(shape, dx).expect("bn grad shape")
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

// ---------------------------------------------------------------------------
// Residual block

pub(crate) struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<Conv2d>,
    mask_mid: Vec<bool>,
    mask_out: Vec<bool>,
}

impl ResidualBlock {
    pub(crate) fn new(
        prefix: &str,
        in_shape: &[usize],
        filters: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new(&format!("{prefix}.conv1"), in_shape, filters, 3, stride, 1, rng);
        let mid = [filters, conv1.geom.oh, conv1.geom.ow];
        let conv2 = Conv2d::new(&format!("{prefix}.conv2"), &mid, filters, 3, 1, 1, rng);
        let shortcut = (in_shape[0] != filters || stride != 1).then(|| {
            Conv2d::new(&format!("{prefix}.shortcut"), in_shape, filters, 1, stride, 0, rng)
        });
        ResidualBlock {
            conv1,
            bn1: BatchNorm::new(&format!("{prefix}.bn1"), filters),
            conv2,
            bn2: BatchNorm::new(&format!("{prefix}.bn2"), filters),
            shortcut,
            mask_mid: Vec::new(),
            mask_out: Vec::new(),
        }
    }
}

fn relu_in_place(t: &mut Tensor) -> Vec<bool> {
    t.data_mut()
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

fn mask_in_place(t: &mut Tensor, mask: &[bool]) {
    t.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| {
        if !m {
            *v = 0.0
        }
    });
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor {
        let a = self.conv1.forward(x.clone(), mode, rng);
        let mut a = self.bn1.forward(a, mode, rng);
        self.mask_mid = relu_in_place(&mut a);
        let a = self.conv2.forward(a, mode, rng);
        let mut out = self.bn2.forward(a, mode, rng);
        match &mut self.shortcut {
            Some(proj) => add_into(out.data_mut(), proj.forward(x, mode, rng).data()),
            None => add_into(out.data_mut(), x.data()),
        }
        self.mask_out = relu_in_place(&mut out);
        out
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut g = grad;
        mask_in_place(&mut g, &self.mask_out);
        let ga = self.bn2.backward(g.clone());
        let mut ga = self.conv2.backward(ga);
        mask_in_place(&mut ga, &self.mask_mid);
        let ga = self.bn1.backward(ga);
        let mut gx = self.conv1.backward(ga);
        match &mut self.shortcut {
            Some(proj) => add_into(gx.data_mut(), proj.backward(g).data()),
            None => add_into(gx.data_mut(), g.data()),
        }
        gx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }
}

// ---------------------------------------------------------------------------
// Dense and elementwise layers

pub(crate) struct Dense {
    inputs: usize,
    units: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub(crate) fn new(prefix: &str, inputs: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            inputs,
            units,
            weight: Param::he_uniform(&format!("{prefix}.weight"), vec![inputs, units], inputs, rng),
            bias: Param::zeros(&format!("{prefix}.bias"), vec![units]),
            input: None,
        }
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let b = x.batch();
        let mut y: Vec<f64> = (0..b).flat_map(|_| self.bias.value.iter().copied()).collect();
        gemm(false, false, b, self.units, self.inputs, 1.0, x.data(), &self.weight.value, 1.0, &mut y);
        self.input = Some(x);
        Tensor::new(vec![b, self.units], y).expect("dense shape")
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.input.as_ref().expect("dense backward before forward");
        let b = x.batch();
        let g = grad.data();
        gemm(true, false, self.inputs, self.units, b, 1.0, x.data(), g, 1.0, &mut self.weight.grad);
        for row in g.chunks(self.units) {
            add_into(&mut self.bias.grad, row);
        }
        let mut dx = vec![0.0; b * self.inputs];
        gemm(false, true, b, self.inputs, self.units, 1.0, g, &self.weight.value, 0.0, &mut dx);
        Tensor::new(vec![b, self.inputs], dx).expect("dense grad shape")
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub(crate) struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub(crate) fn new() -> Self {
        Relu { mask: Vec::new() }
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let mut y = x;
        self.mask = relu_in_place(&mut y);
        y
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut g = grad;
        mask_in_place(&mut g, &self.mask);
        g
    }
}

/// Row-wise softmax over the last axis of a `[B, K]` tensor.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

pub(crate) struct Softmax {
    probs: Option<Tensor>,
}

impl Softmax {
    pub(crate) fn new() -> Self {
        Softmax { probs: None }
    }
}

impl Layer for Softmax {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let k = x.shape()[1];
        let p = Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), k)).expect("softmax shape");
        self.probs = Some(p.clone());
        p
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let p = self.probs.as_ref().expect("softmax backward before forward");
        let k = p.shape()[1];
        let mut dx = Vec::with_capacity(p.data().len());
        for (pr, gr) in p.data().chunks(k).zip(grad.data().chunks(k)) {
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            dx.extend(pr.iter().zip(gr).map(|(pi, gi)| pi * (gi - dot)));
        }
        Tensor::new(p.shape().to_vec(), dx).expect("softmax grad shape")
    }
}

/// Inverted dropout: surviving activations are scaled by `1 / (1 - rate)` at
/// training time so inference needs no rescaling.
pub(crate) struct Dropout {
    rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub(crate) fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor {
        if mode != Mode::Train || self.rate == 0.0 {
            self.mask = None;
            return x;
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.data().len())
            .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        let mut y = x;
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut g = grad;
        if let Some(mask) = &self.mask {
            g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        g
    }
}

pub(crate) struct Flatten {
    in_shape: Vec<usize>,
}

impl Flatten {
    pub(crate) fn new() -> Self {
        Flatten { in_shape: Vec::new() }
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        self.in_shape = x.shape().to_vec();
        let flat = vec![x.batch(), x.item_len()];
        x.reshape(flat)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        grad.reshape(self.in_shape.clone())
    }
}

/// `[B, C, H, W]` image to `[B, W, C*H]` sequence.
pub(crate) struct Sequence {
    in_shape: Vec<usize>,
}

impl Sequence {
    pub(crate) fn new() -> Self {
        Sequence { in_shape: Vec::new() }
    }
}

impl Layer for Sequence {
    fn forward(&mut self, x: Tensor, _mode: Mode, _rng: &mut ChaCha8Rng) -> Tensor {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let d = c * h;
        let mut out = vec![0.0; b * w * d];
        for bi in 0..b {
            let item = x.item(bi);
            for f in 0..d {
                for t in 0..w {
                    out[(bi * w + t) * d + f] = item[f * w + t];
                }
            }
        }
        self.in_shape = x.shape().to_vec();
        Tensor::new(vec![b, w, d], out).expect("sequence shape")
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let (b, c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2], self.in_shape[3]);
        let d = c * h;
        let g = grad.data();
        let mut dx = vec![0.0; b * d * w];
        for bi in 0..b {
            for f in 0..d {
                for t in 0..w {
                    dx[(bi * d + f) * w + t] = g[(bi * w + t) * d + f];
                }
            }
        }
        Tensor::new(self.in_shape.clone(), dx).expect("sequence grad shape")
    }
}

pub(crate) use super::lstm::Lstm;

pub(crate) fn uniform_param(name: &str, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Param {
    Param::uniform(name, shape, bound, rng)
}

pub(crate) fn zero_param(name: &str, shape: Vec<usize>) -> Param {
    Param::zeros(name, shape)
}
