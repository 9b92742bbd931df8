//! A small convolutional classifier with hand-written backpropagation.
//!
//! The default stack is `3×3 conv → ReLU → 1×1 conv → ReLU → avg-pool →
//! flatten → FC`. Convolutions use stride 1 and "same" zero padding.
//! Every weight tensor carries a mask and a momentum buffer of the same
//! shape; biases are never masked.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvDims, ConvWeight, FcWeight, PruneMask, Tensor};

/// Shape of the activation flowing between layers (per sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weight, bias, mask and momentum state of a trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<W> {
    pub weight: W,
    pub bias: Vec<f64>,
    pub mask: PruneMask,
    pub momentum: Vec<f64>,
    pub bias_momentum: Vec<f64>,
}

impl<W: Tensor> Params<W> {
    pub fn new(weight: W, bias: Vec<f64>) -> Self {
        let n = weight.values().len();
        let nb = bias.len();
        Params {
            mask: PruneMask::keep_all(&weight),
            weight,
            bias,
            momentum: vec![0.0; n],
            bias_momentum: vec![0.0; nb],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Params<ConvWeight>),
    Relu,
    AvgPool { size: usize },
    Flatten,
    Fc(Params<FcWeight>),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(p) if p.weight.dims().kernel_len() == 1 => "conv1x1",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Fc(_) => "fc",
        }
    }

    fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        let bad = |why: String| Err(Error::config(format!("{} layer: {why}", self.name())));
        match (self, input) {
            (Layer::Conv(p), ActShape::Map { c, h, w }) => {
                let d = p.weight.dims();
                if d.c != c {
                    return bad(format!("expects {} input channels, got {c}", d.c));
                }
                if d.r % 2 == 0 || d.s % 2 == 0 {
                    return bad("kernel sides must be odd".into());
                }
                if p.bias.len() != d.k {
                    return bad(format!("bias has {} entries for {} channels", p.bias.len(), d.k));
                }
                Ok(ActShape::Map { c: d.k, h, w })
            }
            (Layer::Relu, s) => Ok(s),
            (Layer::AvgPool { size }, ActShape::Map { c, h, w }) => {
                if *size == 0 || h % size != 0 || w % size != 0 {
                    return bad(format!("pool {size} does not tile {h}×{w}"));
                }
                Ok(ActShape::Map { c, h: h / size, w: w / size })
            }
            (Layer::Flatten, s) => Ok(ActShape::Flat(s.len())),
            (Layer::Fc(p), ActShape::Flat(n)) => {
                if p.weight.rows() != n {
                    return bad(format!("expects {} inputs, got {n}", p.weight.rows()));
                }
                if p.bias.len() != p.weight.cols() {
                    return bad("bias length differs from output count".into());
                }
                Ok(ActShape::Flat(p.weight.cols()))
            }
            (_, s) => bad(format!("cannot consume activation {s:?}")),
        }
    }
}

/// Architecture knobs of the default toy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub conv3x3_channels: usize,
    pub conv1x1_channels: usize,
    pub pool: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            conv3x3_channels: 8,
            conv1x1_channels: 8,
            pool: 2,
        }
    }
}

/// Per-layer gradients. `None` for layers without parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
    /// Gradient of the loss with respect to the input batch.
    pub input: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    input: ActShape,
    layers: Vec<Layer>,
}

fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ToyModel {
    /// Validate the layer chain and build a model from explicit layers.
    pub fn from_layers(input: ActShape, layers: Vec<Layer>) -> Result<Self> {
        let model = ToyModel { input, layers };
        model.output_shape()?;
        Ok(model)
    }

    /// The default stack with He-initialised weights and zero biases.
    pub fn new<R: Rng>(
        spec: &ModelSpec,
        channels: usize,
        image_size: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d1 = ConvDims::new(spec.conv3x3_channels, channels, 3, 3);
        let d2 = ConvDims::new(spec.conv1x1_channels, spec.conv3x3_channels, 1, 1);
        if spec.pool == 0 || !image_size.is_multiple_of(spec.pool) {
            return Err(Error::config(format!(
                "pool {} must divide image size {image_size}",
                spec.pool
            )));
        }
        let side = image_size / spec.pool;
        let fc_in = spec.conv1x1_channels * side * side;
        let conv1 = ConvWeight::new(d1, he_normal(rng, channels * 9, d1.len()))?;
        let conv2 = ConvWeight::new(d2, he_normal(rng, d2.c, d2.len()))?;
        let fc = FcWeight::new(fc_in, n_classes, he_normal(rng, fc_in, fc_in * n_classes))?;
        Self::from_layers(
            ActShape::Map {
                c: channels,
                h: image_size,
                w: image_size,
            },
            vec![
                Layer::Conv(Params::new(conv1, vec![0.0; d1.k])),
                Layer::Relu,
                Layer::Conv(Params::new(conv2, vec![0.0; d2.k])),
                Layer::Relu,
                Layer::AvgPool { size: spec.pool },
                Layer::Flatten,
                Layer::Fc(Params::new(fc, vec![0.0; n_classes])),
            ],
        )
    }

    pub fn input_shape(&self) -> ActShape {
        self.input
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        self.layers
            .iter()
            .try_fold(self.input, |shape, layer| layer.output_shape(shape))
    }

    /// Activation shape entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Vec<ActShape> {
        let mut shapes = vec![self.input];
        for layer in &self.layers {
            let next = layer
                .output_shape(*shapes.last().unwrap())
                .expect("shape chain validated at construction");
            shapes.push(next);
        }
        shapes
    }

    pub fn n_classes(&self) -> usize {
        self.output_shape().map(|s| s.len()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Weight payloads of every prunable layer, in layer order.
    pub fn weight_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(p) => Some(p.weight.values()),
                Layer::Fc(p) => Some(p.weight.values()),
                _ => None,
            })
            .collect()
    }

    /// Masks of every prunable layer, in layer order.
    pub fn masks(&self) -> Vec<&PruneMask> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(p) => Some(&p.mask),
                Layer::Fc(p) => Some(&p.mask),
                _ => None,
            })
            .collect()
    }

    /// Measured sparsity over all prunable weights.
    pub fn sparsity(&self) -> f64 {
        crate::tensor::measured_sparsity(self.weight_slices()).unwrap_or(0.0)
    }

    /// Force pruned weights and their momentum to exactly zero.
    pub fn apply_masks(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(p) => {
                    p.mask.zero_pruned(p.weight.values_mut());
                    p.mask.zero_pruned(&mut p.momentum);
                }
                Layer::Fc(p) => {
                    p.mask.zero_pruned(p.weight.values_mut());
                    p.mask.zero_pruned(&mut p.momentum);
                }
                _ => {}
            }
        }
    }

    fn check_batch(&self, x: &[f64]) -> Result<usize> {
        let per = self.input.len();
        if per == 0 || !x.len().is_multiple_of(per) {
            return Err(Error::ShapeMismatch {
                expected: vec![per],
                found: vec![x.len()],
            });
        }
        Ok(x.len() / per)
    }

    /// Activations entering each layer followed by the logits.
    fn forward_cached(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.check_batch(x)?;
        let shapes = self.shapes();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer_forward(layer, &acts[i], n, shapes[i], shapes[i + 1]);
            acts.push(out);
        }
        Ok(acts)
    }

    /// Logits, `batch × n_classes`, row-major.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.pop().expect("at least the input"))
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, x: &[f64], labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels, self.n_classes())?;
        Ok(loss)
    }

    /// Gradients of the mean cross-entropy. Weight gradients are zeroed at
    /// pruned positions.
    pub fn backward(&self, x: &[f64], labels: &[usize]) -> Result<Gradients> {
        let n = self.check_batch(x)?;
        let acts = self.forward_cached(x)?;
        let shapes = self.shapes();
        let (loss, mut delta) =
            softmax_cross_entropy(acts.last().unwrap(), labels, self.n_classes())?;

        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (din, pg) = layer_backward(layer, &acts[i], &acts[i + 1], &delta, n, shapes[i], shapes[i + 1]);
            if let Some(mut pg) = pg {
                let mask = match layer {
                    Layer::Conv(p) => &p.mask,
                    Layer::Fc(p) => &p.mask,
                    _ => unreachable!("only parametric layers yield gradients"),
                };
                mask.zero_pruned(&mut pg.weight);
                grads[i] = Some(pg);
            }
            delta = din;
        }
        Ok(Gradients {
            layers: grads,
            input: delta,
            loss,
        })
    }

    /// SGD with momentum and weight decay:
    /// `v ← μ·v + g + λ·w`, `w ← w − lr·v`, then pruned positions of `w`
    /// and `v` are reset to zero. Biases follow the same rule unmasked.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) {
        fn update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64, wd: f64) {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            let Some(g) = grad else { continue };
            match layer {
                Layer::Conv(p) => {
                    update(p.weight.values_mut(), &mut p.momentum, &g.weight, lr, momentum, weight_decay);
                    update(&mut p.bias, &mut p.bias_momentum, &g.bias, lr, momentum, weight_decay);
                    p.mask.zero_pruned(p.weight.values_mut());
                    p.mask.zero_pruned(&mut p.momentum);
                }
                Layer::Fc(p) => {
                    update(p.weight.values_mut(), &mut p.momentum, &g.weight, lr, momentum, weight_decay);
                    update(&mut p.bias, &mut p.bias_momentum, &g.bias, lr, momentum, weight_decay);
                    p.mask.zero_pruned(p.weight.values_mut());
                    p.mask.zero_pruned(&mut p.momentum);
                }
                _ => {}
            }
        }
    }

    /// Predicted class of every sample.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits.chunks_exact(self.n_classes()).map(argmax).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if n == 0 || logits.len() != n * classes {
        return Err(Error::ShapeMismatch {
            expected: vec![n, classes],
            found: vec![logits.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &y) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = ((row[j] - log_z).exp() - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

fn map_dims(s: ActShape) -> (usize, usize, usize) {
    match s {
        ActShape::Map { c, h, w } => (c, h, w),
        ActShape::Flat(n) => (n, 1, 1),
    }
}

fn conv_forward(p: &Params<ConvWeight>, x: &[f64], n: usize, ins: ActShape, outs: ActShape) -> Vec<f64> {
    let d = p.weight.dims();
    let (c_in, h, w) = map_dims(ins);
    let out_len = outs.len();
    let (pr, ps) = (d.r / 2, d.s / 2);
    let wv = p.weight.values();
    let mut out = vec![0.0; n * out_len];
    for b in 0..n {
        let xs = &x[b * ins.len()..(b + 1) * ins.len()];
        let os = &mut out[b * out_len..(b + 1) * out_len];
        for k in 0..d.k {
            let plane = &mut os[k * h * w..(k + 1) * h * w];
            plane.fill(p.bias[k]);
            for c in 0..c_in {
                let xplane = &xs[c * h * w..(c + 1) * h * w];
                for i in 0..d.r {
                    for j in 0..d.s {
                        let wt = wv[d.index(k, c, i, j)];
                        if wt == 0.0 {
                            continue;
                        }
                        let y0 = pr.saturating_sub(i);
                        let y1 = (h + pr).saturating_sub(i).min(h);
                        let x0 = ps.saturating_sub(j);
                        let x1 = (w + ps).saturating_sub(j).min(w);
                        for y in y0..y1 {
                            let yy = y + i - pr;
                            for xx in x0..x1 {
                                plane[y * w + xx] += wt * xplane[yy * w + xx + j - ps];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    p: &Params<ConvWeight>,
    x: &[f64],
    dout: &[f64],
    n: usize,
    ins: ActShape,
    outs: ActShape,
) -> (Vec<f64>, ParamGrad) {
    let d = p.weight.dims();
    let (c_in, h, w) = map_dims(ins);
    let (pr, ps) = (d.r / 2, d.s / 2);
    let wv = p.weight.values();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; d.k];
    for b in 0..n {
        let xs = &x[b * ins.len()..(b + 1) * ins.len()];
        let ds = &dout[b * outs.len()..(b + 1) * outs.len()];
        let dxs = &mut dx[b * ins.len()..(b + 1) * ins.len()];
        for k in 0..d.k {
            let dplane = &ds[k * h * w..(k + 1) * h * w];
            db[k] += dplane.iter().sum::<f64>();
            for c in 0..c_in {
                let xplane = &xs[c * h * w..(c + 1) * h * w];
                let dxplane = &mut dxs[c * h * w..(c + 1) * h * w];
                for i in 0..d.r {
                    for j in 0..d.s {
                        let widx = d.index(k, c, i, j);
                        let wt = wv[widx];
                        let y0 = pr.saturating_sub(i);
                        let y1 = (h + pr).saturating_sub(i).min(h);
                        let x0 = ps.saturating_sub(j);
                        let x1 = (w + ps).saturating_sub(j).min(w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let yy = y + i - pr;
                            for xx in x0..x1 {
                                let g = dplane[y * w + xx];
                                let src = yy * w + xx + j - ps;
                                acc += g * xplane[src];
                                dxplane[src] += g * wt;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, ParamGrad { weight: dw, bias: db })
}

fn pool_forward(size: usize, x: &[f64], n: usize, ins: ActShape, outs: ActShape) -> Vec<f64> {
    let (c, h, w) = map_dims(ins);
    let (ho, wo) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; n * outs.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[b * ins.len() + ch * h * w..][..h * w];
            let dst = &mut out[b * outs.len() + ch * ho * wo..][..ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / size) * wo + xx / size] += src[y * w + xx] * scale;
                }
            }
        }
    }
    out
}

fn pool_backward(size: usize, dout: &[f64], n: usize, ins: ActShape, outs: ActShape) -> Vec<f64> {
    let (c, h, w) = map_dims(ins);
    let (ho, wo) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut dx = vec![0.0; n * ins.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = &dout[b * outs.len() + ch * ho * wo..][..ho * wo];
            let dst = &mut dx[b * ins.len() + ch * h * w..][..h * w];
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = g[(y / size) * wo + xx / size] * scale;
                }
            }
        }
    }
    dx
}

fn fc_forward(p: &Params<FcWeight>, x: &[f64], n: usize) -> Vec<f64> {
    let (rows, cols) = (p.weight.rows(), p.weight.cols());
    let wv = p.weight.values();
    let mut out = Vec::with_capacity(n * cols);
    for xs in x.chunks_exact(rows).take(n) {
        let mut o = p.bias.clone();
        for (xi, wrow) in xs.iter().zip(wv.chunks_exact(cols)) {
            if *xi == 0.0 {
                continue;
            }
            for (oj, wij) in o.iter_mut().zip(wrow) {
                *oj += xi * wij;
            }
        }
        out.extend(o);
    }
    out
}

fn fc_backward(p: &Params<FcWeight>, x: &[f64], dout: &[f64], n: usize) -> (Vec<f64>, ParamGrad) {
    let (rows, cols) = (p.weight.rows(), p.weight.cols());
    let wv = p.weight.values();
    let mut dx = vec![0.0; n * rows];
    let mut dw = vec![0.0; rows * cols];
    let mut db = vec![0.0; cols];
    for b in 0..n {
        let xs = &x[b * rows..(b + 1) * rows];
        let g = &dout[b * cols..(b + 1) * cols];
        for (dbj, gj) in db.iter_mut().zip(g) {
            *dbj += gj;
        }
        for i in 0..rows {
            let wrow = &wv[i * cols..(i + 1) * cols];
            let dwrow = &mut dw[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for j in 0..cols {
                dwrow[j] += xs[i] * g[j];
                acc += wrow[j] * g[j];
            }
            dx[b * rows + i] = acc;
        }
    }
    (dx, ParamGrad { weight: dw, bias: db })
}

fn layer_forward(layer: &Layer, x: &[f64], n: usize, ins: ActShape, outs: ActShape) -> Vec<f64> {
    match layer {
        Layer::Conv(p) => conv_forward(p, x, n, ins, outs),
        Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::AvgPool { size } => pool_forward(*size, x, n, ins, outs),
        Layer::Flatten => x.to_vec(),
        Layer::Fc(p) => fc_forward(p, x, n),
    }
}

fn layer_backward(
    layer: &Layer,
    x: &[f64],
    _y: &[f64],
    dout: &[f64],
    n: usize,
    ins: ActShape,
    outs: ActShape,
) -> (Vec<f64>, Option<ParamGrad>) {
    match layer {
        Layer::Conv(p) => {
            let (dx, g) = conv_backward(p, x, dout, n, ins, outs);
            (dx, Some(g))
        }
        Layer::Relu => (
            x.iter().zip(dout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
            None,
        ),
        Layer::AvgPool { size } => (pool_backward(*size, dout, n, ins, outs), None),
        Layer::Flatten => (dout.to_vec(), None),
        Layer::Fc(p) => {
            let (dx, g) = fc_backward(p, x, dout, n);
            (dx, Some(g))
        }
    }
}
