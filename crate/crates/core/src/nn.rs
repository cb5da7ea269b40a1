//! Minimal feed-forward network with explicit forward and backward passes.
//!
//! Activations are laid out row-major with the batch as the leading
//! dimension. Dense weights have shape `(fan_out, fan_in)`; convolution
//! weights have shape `(out_channels, in_channels, kernel, kernel)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
        #[serde(default = "yes")]
        has_bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        has_bias: bool,
    },
    Relu,
    Flatten,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Dense { has_bias, .. } | LayerSpec::Conv2d { has_bias, .. } => has_bias,
            _ => false,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                fan_in, fan_out, ..
            } => Some(vec![fan_out, fan_in]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense {
                fan_out,
                has_bias: true,
                ..
            } => Some(fan_out),
            LayerSpec::Conv2d {
                out_channels,
                has_bias: true,
                ..
            } => Some(out_channels),
            _ => None,
        }
    }

    /// Fan-in used by the initializer.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { fan_in, .. } => Some(fan_in),
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => Some(in_channels * kernel * kernel),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                fan_in, fan_out, ..
            } => (input == [fan_in]).then(|| vec![fan_out]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels || kernel == 0 || stride == 0 {
                    return None;
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return None;
                }
                Some(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

/// Input geometry plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }

    /// Dense stack `dims[0] -> dims[1] -> ...` with ReLU between layers.
    pub fn mlp(dims: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                fan_in: pair[0],
                fan_out: pair[1],
                has_bias: true,
            });
        }
        Self::new(vec![dims[0]], layers)
    }

    /// Per-sample shapes: entry `i` is the input to layer `i`, the last entry
    /// is the network output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec("input shape must be nonempty and positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes.last().unwrap();
            let out = layer.output_shape(input).ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "layer {i} ({}) does not accept input shape {input:?}",
                    layer.name()
                ))
            })?;
            if out.contains(&0) {
                return Err(Error::InvalidSpec(format!("layer {i} produces an empty output")));
            }
            shapes.push(out);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] < 2 {
            return Err(Error::InvalidSpec(format!(
                "network output must be a vector of at least 2 logits, got {out:?}"
            )));
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap()[0])
    }

    pub fn parameterized_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_parameterized())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    /// Per-sample activation shapes, cached from `arch`.
    shapes: Vec<Vec<usize>>,
    weights: Vec<Tensor>,
    biases: Vec<Option<Tensor>>,
}

impl Network {
    pub fn from_parts(
        arch: Architecture,
        weights: Vec<Tensor>,
        biases: Vec<Option<Tensor>>,
    ) -> Result<Self> {
        let shapes = arch.shapes()?;
        let specs: Vec<&LayerSpec> = arch.parameterized_layers().collect();
        if weights.len() != specs.len() || biases.len() != specs.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameterized layers, got {} weights and {} biases",
                specs.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let want = spec.weight_shape().unwrap();
            if weights[i].shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("weights of parameterized layer {i} ({})", spec.name()),
                    expected: want,
                    actual: weights[i].shape().to_vec(),
                });
            }
            match (spec.bias_len(), &biases[i]) {
                (None, None) => {}
                (Some(n), Some(b)) if b.shape() == [n] => {}
                (want, got) => {
                    return Err(Error::ShapeMismatch {
                        context: format!("bias of parameterized layer {i} ({})", spec.name()),
                        expected: want.map(|n| vec![n]).unwrap_or_default(),
                        actual: got.as_ref().map(|b| b.shape().to_vec()).unwrap_or_default(),
                    })
                }
            }
        }
        Ok(Self {
            arch,
            shapes,
            weights,
            biases,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Option<Tensor>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Option<Tensor>] {
        &mut self.biases
    }

    pub fn num_parameterized(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().flatten().map(Tensor::len).sum::<usize>()
    }

    /// Round every parameter through `f32`, the precision used on disk.
    pub fn round_to_f32(&mut self) {
        for w in &mut self.weights {
            w.round_to_f32();
        }
        for b in self.biases.iter_mut().flatten() {
            b.round_to_f32();
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() < 2 || batch.shape()[1..] != self.arch.input_shape[..] {
            let mut expected = vec![batch.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.arch.input_shape);
            return Err(Error::ShapeMismatch {
                context: format!("input of layer 0 ({})", self.arch.layers[0].name()),
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn run(&self, batch: &Tensor, mut cache: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        self.check_batch(batch)?;
        let n = batch.rows();
        let mut x = batch.clone();
        let mut p = 0;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&self.shapes[i + 1]);
            let y = match *layer {
                LayerSpec::Dense { .. } => {
                    let y = dense_forward(&x, &self.weights[p], self.biases[p].as_ref(), out_shape);
                    p += 1;
                    y
                }
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let y = conv_forward(
                        &x,
                        &self.weights[p],
                        self.biases[p].as_ref(),
                        stride,
                        padding,
                        out_shape,
                    );
                    p += 1;
                    y
                }
                LayerSpec::Relu => x.map(|v| v.max(0.0)),
                LayerSpec::Flatten => x.clone().reshape(out_shape)?,
            };
            if let Some(c) = cache.as_deref_mut() {
                c.push(x);
            }
            x = y;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network logits".into()));
        }
        Ok(x)
    }

    /// Logits for a batch shaped `(batch, input_shape...)`, plus the layer
    /// inputs retained for `loss_and_backward`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut inputs = Vec::with_capacity(self.arch.layers.len());
        let logits = self.run(batch, Some(&mut inputs))?;
        Ok((logits, ForwardCache { inputs }))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, None)
    }

    /// Mean softmax cross-entropy and the batch-averaged parameter gradients.
    pub fn loss_and_backward(
        &self,
        cache: &ForwardCache,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, Gradients)> {
        if cache.inputs.len() != self.arch.layers.len() {
            return Err(Error::InvalidArgument("forward cache does not match network".into()));
        }
        let (loss, mut grad) = softmax_cross_entropy(logits, labels)?;
        let mut gw: Vec<Option<Tensor>> = vec![None; self.weights.len()];
        let mut gb: Vec<Option<Tensor>> = vec![None; self.weights.len()];
        let mut p = self.weights.len();
        for (i, layer) in self.arch.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let need_input_grad = i > 0;
            match *layer {
                LayerSpec::Dense { .. } => {
                    p -= 1;
                    let (dx, dw, db) =
                        dense_backward(input, &self.weights[p], &grad, self.biases[p].is_some());
                    gw[p] = Some(dw);
                    gb[p] = db;
                    grad = dx;
                }
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    p -= 1;
                    let (dx, dw, db) = conv_backward(
                        input,
                        &self.weights[p],
                        &grad,
                        stride,
                        padding,
                        self.biases[p].is_some(),
                        need_input_grad,
                    );
                    gw[p] = Some(dw);
                    gb[p] = db;
                    grad = dx;
                }
                LayerSpec::Relu => {
                    // derivative at 0 is taken as 0
                    for (g, &l) in grad.data_mut().iter_mut().zip(input.data()) {
                        if l <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                LayerSpec::Flatten => {
                    grad = grad.reshape(input.shape().to_vec())?;
                }
            }
        }
        let grads = Gradients {
            weights: gw.into_iter().map(Option::unwrap).collect(),
            biases: gb,
        };
        Ok((loss, grads))
    }
}

/// Layer inputs recorded during `Network::forward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<Tensor>,
}

/// Parameter gradients, shape-congruent with the network they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Option<Tensor>>,
}

fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, out_shape: Vec<usize>) -> Tensor {
    let (n, fin) = (x.rows(), x.row_len());
    let fout = w.shape()[0];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * fout];
    for s in 0..n {
        let xs = &xd[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let wo = &wd[o * fin..(o + 1) * fin];
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for (a, c) in wo.iter().zip(xs) {
                acc += a * c;
            }
            out[s * fout + o] = acc;
        }
    }
    Tensor::new(out_shape, out).expect("dense output shape")
}

fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, fin) = (x.rows(), x.row_len());
    let fout = w.shape()[0];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![0.0; fout * fin];
    let mut dx = vec![0.0; n * fin];
    let mut db = vec![0.0; fout];
    for s in 0..n {
        let xs = &xd[s * fin..(s + 1) * fin];
        let dxs = &mut dx[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let g = dyd[s * fout + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wo = &wd[o * fin..(o + 1) * fin];
            let dwo = &mut dw[o * fin..(o + 1) * fin];
            for j in 0..fin {
                dwo[j] += g * xs[j];
                dxs[j] += g * wo[j];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        with_bias.then(|| Tensor::new(vec![fout], db).unwrap()),
    )
}

/// Source coordinate for output position `o` and kernel tap `k`, or `None`
/// inside the zero padding.
#[inline]
fn src_index(o: usize, k: usize, stride: usize, padding: usize, size: usize) -> Option<usize> {
    (o * stride + k).checked_sub(padding).filter(|&i| i < size)
}

fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
    out_shape: Vec<usize>,
) -> Tensor {
    let (n, c, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * oc * ho * wo];
    for s in 0..n {
        for o in 0..oc {
            let bias = b.map_or(0.0, |b| b.data()[o]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ci in 0..c {
                        for ky in 0..k {
                            let Some(iy) = src_index(oy, ky, stride, padding, h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = src_index(ox, kx, stride, padding, wi) else {
                                    continue;
                                };
                                acc += wd[((o * c + ci) * k + ky) * k + kx]
                                    * xd[((s * c + ci) * h + iy) * wi + ix];
                            }
                        }
                    }
                    out[((s * oc + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("conv output shape")
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
    with_bias: bool,
    need_input_grad: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, c, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; if need_input_grad { xd.len() } else { 0 }];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; oc];
    for s in 0..n {
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dyd[((s * oc + o) * ho + oy) * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for ci in 0..c {
                        for ky in 0..k {
                            let Some(iy) = src_index(oy, ky, stride, padding, h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = src_index(ox, kx, stride, padding, wi) else {
                                    continue;
                                };
                                let wi_ = ((o * c + ci) * k + ky) * k + kx;
                                let xi = ((s * c + ci) * h + iy) * wi + ix;
                                dw[wi_] += g * xd[xi];
                                if need_input_grad {
                                    dx[xi] += g * wd[wi_];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = if need_input_grad {
        Tensor::new(x.shape().to_vec(), dx).unwrap()
    } else {
        Tensor::zeros(x.shape())
    };
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        with_bias.then(|| Tensor::new(vec![oc], db).unwrap()),
    )
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "labels".into(),
            expected: vec![rows],
            actual: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Per-sample cross-entropy with a numerically stable log-sum-exp.
fn sample_ce(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.rows(), logits.row_len());
    check_labels(labels, n, k)?;
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label];
        for j in 0..k {
            let p = exps[j] / z;
            grad[s * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((
        loss / n as f64,
        Tensor::new(logits.shape().to_vec(), grad).unwrap(),
    ))
}

/// Momentum buffers for classical SGD with coupled L2.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub l2_scale: f64,
    pub weight_buffers: Vec<Tensor>,
    pub bias_buffers: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(net: &Network, momentum: f64, l2_scale: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} not in [0, 1)")));
        }
        if !(l2_scale >= 0.0 && l2_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 scale {l2_scale} must be >= 0")));
        }
        Ok(Self {
            momentum,
            l2_scale,
            weight_buffers: net.weights().iter().map(|w| Tensor::zeros(w.shape())).collect(),
            bias_buffers: net
                .biases()
                .iter()
                .map(|b| b.as_ref().map(|b| Tensor::zeros(b.shape())))
                .collect(),
        })
    }
}

fn congruent(a: &[Tensor], b: &[Tensor], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("{what}: layer count differs")));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("{what} of parameterized layer {i}"),
                expected: x.shape().to_vec(),
                actual: y.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// One classical-momentum step:
/// `buf = m * buf + (grad + l2 * w)`, `w -= lr * buf`.
///
/// The L2 term applies to weights only; biases get plain momentum.
pub fn sgd_momentum_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    congruent(&net.weights, &grads.weights, "gradients")?;
    congruent(&net.weights, &state.weight_buffers, "momentum buffers")?;
    let (m, l2) = (state.momentum, state.l2_scale);
    for ((w, g), buf) in net
        .weights
        .iter_mut()
        .zip(&grads.weights)
        .zip(&mut state.weight_buffers)
    {
        for ((wv, &gv), bv) in w.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            *bv = m * *bv + (gv + l2 * *wv);
            *wv -= lr * *bv;
        }
    }
    for ((b, g), buf) in net
        .biases
        .iter_mut()
        .zip(&grads.biases)
        .zip(&mut state.bias_buffers)
    {
        let (Some(b), Some(g), Some(buf)) = (b.as_mut(), g.as_ref(), buf.as_mut()) else {
            continue;
        };
        for ((bv, &gv), mv) in b.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            *mv = m * *mv + gv;
            *bv -= lr * *mv;
        }
    }
    if net.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weights after sgd step".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_CHUNK: usize = 256;

/// Mean loss and top-1 accuracy over a dataset.
///
/// Chunks are evaluated in parallel and reduced in index order, so the
/// result does not depend on the worker count.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<Evaluation> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    check_labels(ds.labels(), n, net.num_classes())?;
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let partial: Vec<Result<(f64, usize)>> = starts
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let logits = net.logits(&ds.features().gather_rows(&idx))?;
            let k = logits.row_len();
            let mut loss = 0.0;
            let mut correct = 0;
            for (r, &i) in idx.iter().enumerate() {
                let row = &logits.data()[r * k..(r + 1) * k];
                let label = ds.labels()[i];
                loss += sample_ce(row, label);
                if argmax(row) == label {
                    correct += 1;
                }
            }
            Ok((loss, correct))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for p in partial {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    Ok(Evaluation {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
    })
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// with zero biases.
pub fn init_weights(arch: &Architecture, seed: u64) -> Result<Network> {
    arch.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for spec in arch.parameterized_layers() {
        let limit = (6.0 / spec.fan_in().unwrap() as f64).sqrt();
        let shape = spec.weight_shape().unwrap();
        weights.push(Tensor::from_fn(&shape, |_| rng.random_range(-limit..limit)));
        biases.push(spec.bias_len().map(|n| Tensor::zeros(&[n])));
    }
    Network::from_parts(arch.clone(), weights, biases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(fan_in: usize, fan_out: usize) -> LayerSpec {
        LayerSpec::Dense {
            fan_in,
            fan_out,
            has_bias: true,
        }
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let arch = Architecture::new(vec![3], vec![dense(3, 3)]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let net = Network::from_parts(arch, vec![eye], vec![Some(Tensor::zeros(&[3]))]).unwrap();
        let logits = net.logits(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn symmetric_unit_gives_zero_logit() {
        let arch = Architecture::new(
            vec![2],
            vec![LayerSpec::Dense {
                fan_in: 2,
                fan_out: 2,
                has_bias: false,
            }],
        );
        let w = t(&[2, 2], &[0.5, -0.5, 0.0, 0.0]);
        let net = Network::from_parts(arch, vec![w], vec![None]).unwrap();
        let logits = net.logits(&t(&[1, 2], &[2.0, 2.0])).unwrap();
        assert_eq!(logits.data()[0], 0.0);
    }

    #[test]
    fn dense_then_relu_hand_evaluation() {
        // [[1,-1],[0,1]] * (1,1) = (0, 1); relu keeps (0, 1)
        let arch = Architecture::new(vec![2], vec![dense(2, 2), LayerSpec::Relu]);
        let w = t(&[2, 2], &[1.0, -1.0, 0.0, 1.0]);
        let net = Network::from_parts(arch, vec![w], vec![Some(Tensor::zeros(&[2]))]).unwrap();
        let out = net.logits(&t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn input_shape_mismatch_names_layer() {
        let net = init_weights(&Architecture::mlp(&[3, 2]), 0).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 4])).unwrap_err().to_string();
        assert!(err.contains("layer 0 (dense)"), "{err}");
    }

    #[test]
    fn non_composable_spec_rejected() {
        let arch = Architecture::new(vec![3], vec![dense(3, 4), dense(5, 2)]);
        let err = init_weights(&arch, 1).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn uniform_softmax_loss_is_ln2() {
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[7.5, 7.5]), &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let err = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, num_classes: 2 }));
    }

    #[test]
    fn single_unit_gradient_matches_hand_derivation() {
        // logits = (w . x, 0) via a second zero row; label 0.
        let arch = Architecture::new(
            vec![2],
            vec![LayerSpec::Dense {
                fan_in: 2,
                fan_out: 2,
                has_bias: false,
            }],
        );
        let w = t(&[2, 2], &[0.3, -0.2, 0.0, 0.0]);
        let net = Network::from_parts(arch, vec![w], vec![None]).unwrap();
        let x = t(&[1, 2], &[1.5, 0.5]);
        let (logits, cache) = net.forward(&x).unwrap();
        let (_, g) = net.loss_and_backward(&cache, &logits, &[0]).unwrap();
        let z: f64 = 0.3 * 1.5 - 0.2 * 0.5;
        let p0 = z.exp() / (z.exp() + 1.0);
        let expect = [(p0 - 1.0) * 1.5, (p0 - 1.0) * 0.5, (1.0 - p0) * 1.5, (1.0 - p0) * 0.5];
        for (a, e) in g.weights[0].data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn plain_sgd_step() {
        let arch = Architecture::new(
            vec![1],
            vec![LayerSpec::Dense {
                fan_in: 1,
                fan_out: 2,
                has_bias: false,
            }],
        );
        let mut net =
            Network::from_parts(arch, vec![t(&[2, 1], &[1.0, 1.0])], vec![None]).unwrap();
        let mut st = OptimizerState::new(&net, 0.0, 0.0).unwrap();
        let g = Gradients {
            weights: vec![t(&[2, 1], &[0.5, 0.0])],
            biases: vec![None],
        };
        sgd_momentum_step(&mut net, &g, &mut st, 0.1).unwrap();
        assert!((net.weights()[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(net.weights()[0].data()[1], 1.0);
    }

    #[test]
    fn momentum_two_steps() {
        let arch = Architecture::new(
            vec![1],
            vec![LayerSpec::Dense {
                fan_in: 1,
                fan_out: 2,
                has_bias: false,
            }],
        );
        let mut net =
            Network::from_parts(arch, vec![t(&[2, 1], &[1.0, 1.0])], vec![None]).unwrap();
        let mut st = OptimizerState::new(&net, 0.9, 0.0).unwrap();
        let g = Gradients {
            weights: vec![t(&[2, 1], &[1.0, 1.0])],
            biases: vec![None],
        };
        sgd_momentum_step(&mut net, &g, &mut st, 0.1).unwrap();
        assert!((net.weights()[0].data()[0] - 0.9).abs() < 1e-12);
        sgd_momentum_step(&mut net, &g, &mut st, 0.1).unwrap();
        assert!((net.weights()[0].data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut net = init_weights(&Architecture::mlp(&[3, 4, 2]), 3).unwrap();
        let before = net.clone();
        let mut st = OptimizerState::new(&net, 0.9, 0.0).unwrap();
        let g = Gradients {
            weights: net.weights().iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: net
                .biases()
                .iter()
                .map(|b| b.as_ref().map(|b| Tensor::zeros(b.shape())))
                .collect(),
        };
        sgd_momentum_step(&mut net, &g, &mut st, 0.5).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut net = init_weights(&Architecture::mlp(&[2, 2]), 3).unwrap();
        let mut st = OptimizerState::new(&net, 0.9, 0.0).unwrap();
        let g = Gradients {
            weights: net.weights().to_vec(),
            biases: net.biases().to_vec(),
        };
        assert!(sgd_momentum_step(&mut net, &g, &mut st, 0.0).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = Architecture::mlp(&[5, 7, 3]);
        let a = init_weights(&arch, 11).unwrap();
        let b = init_weights(&arch, 11).unwrap();
        let c = init_weights(&arch, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights()[0], c.weights()[0]);
    }

    #[test]
    fn init_std_follows_fan_in_rule() {
        let net = init_weights(&Architecture::mlp(&[100, 100]), 5).unwrap();
        let w = net.weights()[0].data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // U(-a, a) has standard deviation a / sqrt(3) = sqrt(2 / fan_in).
        let target = (2.0_f64 / 100.0).sqrt();
        assert!((std - target).abs() / target < 0.2, "{std} vs {target}");
    }

    #[test]
    fn conv_output_geometry() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            has_bias: true,
        };
        assert_eq!(spec.output_shape(&[1, 8, 8]), Some(vec![4, 4, 4]));
        assert_eq!(spec.output_shape(&[2, 8, 8]), None);
    }
}
