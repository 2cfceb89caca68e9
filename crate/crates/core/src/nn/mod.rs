//! Small feed-forward networks with explicit reverse-mode gradients.
//!
//! A [`Network`] is compiled from an [`Architecture`] descriptor into a list
//! of ops that index into one flat `f64` parameter vector. Forward passes
//! return a [`Tape`] instead of caching inside the network, so a network can
//! be evaluated several times (real batch, fake batch) before any backward
//! pass, and evaluation is `&self` only.
//!
//! Samples are rows of an `Array2<f64>`; image samples are flattened in
//! channel-major (C, H, W) order.

mod conv;
pub mod optim;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use conv::ConvGeom;
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("conditional network needs one label per sample (got {got}, batch {batch})")]
    MissingLabels { batch: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// Per-sample tensor shape. Flat feature vectors are `(n, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(n: usize) -> Self {
        Self {
            channels: n,
            height: 1,
            width: 1,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Slope 0.2 on the negative side.
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Row-wise normalized exponential.
    Softmax,
}

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    ConvTranspose2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    /// Reinterprets the flat activation as an image; the element count must match.
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
    Activation {
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        Self::Dense { units }
    }

    pub fn act(activation: Activation) -> Self {
        Self::Activation { activation }
    }

    pub fn conv(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        }
    }

    pub fn conv_t(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::ConvTranspose2d {
            filters,
            kernel,
            stride,
            padding,
        }
    }
}

/// Label conditioning: a learned class embedding concatenated to the flat
/// activation entering layer `at_layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    pub n_classes: usize,
    pub embed_dim: usize,
    pub at_layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub conditioning: Option<Conditioning>,
}

impl Architecture {
    /// Stable content hash used to tag checkpoints.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn last_activation(&self) -> Option<Activation> {
        match self.layers.last() {
            Some(LayerSpec::Activation { activation }) => Some(*activation),
            _ => None,
        }
    }

    pub fn output_shape(&self) -> Result<Shape, NnError> {
        Ok(compile(self)?.1)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Dense {
        w: usize,
        b: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv {
        w: usize,
        b: usize,
        geom: ConvGeom,
        filters: usize,
    },
    ConvT {
        w: usize,
        b: usize,
        geom: ConvGeom,
        in_channels: usize,
    },
    Act(Activation),
    Concat {
        table: usize,
        n_classes: usize,
        dim: usize,
        n_in: usize,
    },
}

impl Op {
    fn n_params(&self) -> usize {
        match self {
            Op::Dense { n_in, n_out, .. } => n_in * n_out + n_out,
            Op::Conv { geom, filters, .. } => filters * geom.patch_len() + filters,
            Op::ConvT {
                geom, in_channels, ..
            } => in_channels * geom.patch_len() + geom.channels,
            Op::Act(_) => 0,
            Op::Concat { n_classes, dim, .. } => n_classes * dim,
        }
    }
}

fn invalid(index: usize, reason: impl Into<String>) -> NnError {
    NnError::InvalidLayer {
        index,
        reason: reason.into(),
    }
}

fn compile(arch: &Architecture) -> Result<(Vec<Op>, Shape, usize), NnError> {
    let mut ops = Vec::with_capacity(arch.layers.len() + 1);
    let mut shape = arch.input;
    let mut offset = 0usize;
    if shape.is_empty() {
        return Err(invalid(0, "empty input shape"));
    }
    if let Some(c) = arch.conditioning {
        if c.at_layer > arch.layers.len() {
            return Err(invalid(
                c.at_layer,
                "conditioning position past the last layer",
            ));
        }
        if c.n_classes == 0 || c.embed_dim == 0 {
            return Err(invalid(
                c.at_layer,
                "conditioning needs classes and a non-empty embedding",
            ));
        }
    }
    for index in 0..=arch.layers.len() {
        if let Some(c) = arch.conditioning.filter(|c| c.at_layer == index) {
            let op = Op::Concat {
                table: offset,
                n_classes: c.n_classes,
                dim: c.embed_dim,
                n_in: shape.len(),
            };
            offset += op.n_params();
            shape = Shape::flat(shape.len() + c.embed_dim);
            ops.push(op);
        }
        let Some(layer) = arch.layers.get(index) else {
            break;
        };
        let op = match *layer {
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(invalid(index, "dense layer with zero units"));
                }
                let op = Op::Dense {
                    w: offset,
                    b: offset + shape.len() * units,
                    n_in: shape.len(),
                    n_out: units,
                };
                shape = Shape::flat(units);
                op
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(invalid(
                        index,
                        "conv needs positive filters, kernel and stride",
                    ));
                }
                if shape.height + 2 * padding < kernel || shape.width + 2 * padding < kernel {
                    return Err(invalid(index, "kernel larger than padded input"));
                }
                let oh = (shape.height + 2 * padding - kernel) / stride + 1;
                let ow = (shape.width + 2 * padding - kernel) / stride + 1;
                let geom = ConvGeom::new(shape, kernel, stride, padding, oh, ow);
                let op = Op::Conv {
                    w: offset,
                    b: offset + filters * geom.patch_len(),
                    geom,
                    filters,
                };
                shape = Shape::image(filters, oh, ow);
                op
            }
            LayerSpec::ConvTranspose2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(invalid(
                        index,
                        "transposed conv needs positive filters, kernel and stride",
                    ));
                }
                let oh = ((shape.height - 1) * stride + kernel).checked_sub(2 * padding);
                let ow = ((shape.width - 1) * stride + kernel).checked_sub(2 * padding);
                let (Some(oh), Some(ow)) = (oh, ow) else {
                    return Err(invalid(index, "padding too large for transposed conv"));
                };
                let out = Shape::image(filters, oh, ow);
                // The output image plays the role of the convolution input.
                let geom = ConvGeom::new(out, kernel, stride, padding, shape.height, shape.width);
                let op = Op::ConvT {
                    w: offset,
                    b: offset + shape.channels * geom.patch_len(),
                    geom,
                    in_channels: shape.channels,
                };
                shape = out;
                op
            }
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => {
                let next = Shape::image(channels, height, width);
                if next.len() != shape.len() {
                    return Err(invalid(
                        index,
                        format!("reshape {} -> {} elements", shape.len(), next.len()),
                    ));
                }
                shape = next;
                continue;
            }
            LayerSpec::Activation { activation } => Op::Act(activation),
        };
        offset += op.n_params();
        ops.push(op);
    }
    Ok((ops, shape, offset))
}

/// Intermediate values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    entries: Vec<TapeEntry>,
    batch: usize,
}

#[derive(Debug, Clone)]
enum TapeEntry {
    Input(Array2<f64>),
    Cols(Array2<f64>),
    Output(Array2<f64>),
    Labels(Vec<usize>),
    Nothing,
}

#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    ops: Vec<Op>,
    output: Shape,
    params: Vec<f64>,
}

impl Network {
    /// Builds a network with Glorot-uniform weights, zero biases and
    /// standard-normal label embeddings.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, NnError> {
        let (ops, output, n) = compile(&arch)?;
        let mut params = vec![0.0; n];
        for op in &ops {
            match *op {
                Op::Dense { w, n_in, n_out, .. } => {
                    glorot(&mut params[w..w + n_in * n_out], n_in, n_out, rng)
                }
                Op::Conv {
                    w, geom, filters, ..
                } => {
                    let fan_in = geom.patch_len();
                    let fan_out = filters * geom.kernel * geom.kernel;
                    glorot(&mut params[w..w + filters * fan_in], fan_in, fan_out, rng)
                }
                Op::ConvT {
                    w,
                    geom,
                    in_channels,
                    ..
                } => {
                    let fan_in = in_channels * geom.kernel * geom.kernel;
                    let fan_out = geom.patch_len();
                    glorot(
                        &mut params[w..w + in_channels * fan_out],
                        fan_in,
                        fan_out,
                        rng,
                    )
                }
                Op::Concat {
                    table,
                    n_classes,
                    dim,
                    ..
                } => {
                    for p in &mut params[table..table + n_classes * dim] {
                        *p = rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
                Op::Act(_) => {}
            }
        }
        Ok(Self {
            arch,
            ops,
            output,
            params,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, NnError> {
        let (ops, output, n) = compile(&arch)?;
        if params.len() != n {
            return Err(NnError::ParamCount {
                expected: n,
                got: params.len(),
            });
        }
        Ok(Self {
            arch,
            ops,
            output,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.arch.conditioning.map(|c| c.n_classes)
    }

    pub fn is_conditional(&self) -> bool {
        self.arch.conditioning.is_some()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Hash of the parameter bit patterns; cheap provenance tag.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ self.params.len() as u64;
        for p in &self.params {
            h ^= p.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
            h ^= h >> 29;
        }
        h
    }

    /// Evaluates the network without recording a tape.
    pub fn predict(
        &self,
        x: &Array2<f64>,
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>, NnError> {
        self.run(x, labels, false).map(|(y, _)| y)
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        labels: Option<&[usize]>,
    ) -> Result<(Array2<f64>, Tape), NnError> {
        self.run(x, labels, true)
    }

    fn run(
        &self,
        x: &Array2<f64>,
        labels: Option<&[usize]>,
        record: bool,
    ) -> Result<(Array2<f64>, Tape), NnError> {
        if x.ncols() != self.arch.input.len() {
            return Err(NnError::InputWidth {
                expected: self.arch.input.len(),
                got: x.ncols(),
            });
        }
        let batch = x.nrows();
        let mut entries = Vec::with_capacity(if record { self.ops.len() } else { 0 });
        let mut cur = x.to_owned();
        for op in &self.ops {
            let (next, entry) = match *op {
                Op::Dense { w, b, n_in, n_out } => {
                    let wv = self.view2(w, n_in, n_out);
                    let mut y = cur.dot(&wv);
                    y += &self.view1(b, n_out);
                    (y, TapeEntry::Input(cur))
                }
                Op::Conv {
                    w,
                    b,
                    geom,
                    filters,
                } => {
                    let cols = geom.im2col_batch(&cur);
                    let wv = self.view2(w, filters, geom.patch_len());
                    let mut out = wv.dot(&cols);
                    let bias = self.view1(b, filters);
                    for (mut row, &bi) in out.rows_mut().into_iter().zip(bias.iter()) {
                        row += bi;
                    }
                    (
                        geom.channel_major_to_batch(&out, batch),
                        TapeEntry::Cols(cols),
                    )
                }
                Op::ConvT {
                    w,
                    b,
                    geom,
                    in_channels,
                } => {
                    let xin = geom.batch_to_channel_major(&cur, in_channels);
                    let wv = self.view2(w, in_channels, geom.patch_len());
                    let cols = wv.t().dot(&xin);
                    let mut y = geom.col2im_batch(&cols, batch);
                    let bias = self.view1(b, geom.channels);
                    let plane = geom.height * geom.width;
                    for mut row in y.rows_mut() {
                        for (c, &bc) in bias.iter().enumerate() {
                            row.slice_mut(s![c * plane..(c + 1) * plane])
                                .mapv_inplace(|v| v + bc);
                        }
                    }
                    (y, TapeEntry::Input(xin))
                }
                Op::Act(a) => {
                    let y = activate(a, cur);
                    let entry = if record {
                        TapeEntry::Output(y.clone())
                    } else {
                        TapeEntry::Nothing
                    };
                    (y, entry)
                }
                Op::Concat {
                    table,
                    n_classes,
                    dim,
                    n_in,
                } => {
                    let labels = labels.ok_or(NnError::MissingLabels { batch, got: 0 })?;
                    if labels.len() != batch {
                        return Err(NnError::MissingLabels {
                            batch,
                            got: labels.len(),
                        });
                    }
                    let mut y = Array2::zeros((batch, n_in + dim));
                    y.slice_mut(s![.., ..n_in]).assign(&cur);
                    let emb = self.view2(table, n_classes, dim);
                    for (r, &l) in labels.iter().enumerate() {
                        if l >= n_classes {
                            return Err(NnError::LabelOutOfRange {
                                label: l,
                                n_classes,
                            });
                        }
                        y.slice_mut(s![r, n_in..]).assign(&emb.row(l));
                    }
                    (y, TapeEntry::Labels(labels.to_vec()))
                }
            };
            if record {
                entries.push(entry);
            }
            cur = next;
        }
        Ok((cur, Tape { entries, batch }))
    }

    /// Back-propagates `grad_out` (d objective / d output) through the
    /// recorded tape. Parameter gradients are accumulated into `param_grads`
    /// when given; the gradient with respect to the network input is returned.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: Array2<f64>,
        mut param_grads: Option<&mut [f64]>,
    ) -> Array2<f64> {
        assert_eq!(
            tape.entries.len(),
            self.ops.len(),
            "tape was recorded by a different network"
        );
        if let Some(g) = param_grads.as_deref() {
            assert_eq!(g.len(), self.params.len());
        }
        let batch = tape.batch;
        let mut grad = grad_out;
        for (op, entry) in self.ops.iter().zip(&tape.entries).rev() {
            grad = match (op, entry) {
                (&Op::Dense { w, b, n_in, n_out }, TapeEntry::Input(x)) => {
                    if let Some(g) = param_grads.as_deref_mut() {
                        let dw = x.t().dot(&grad);
                        add_into(&mut g[w..w + n_in * n_out], dw.iter());
                        add_into(&mut g[b..b + n_out], grad.sum_axis(Axis(0)).iter());
                    }
                    grad.dot(&self.view2(w, n_in, n_out).t())
                }
                (
                    &Op::Conv {
                        w,
                        b,
                        geom,
                        filters,
                    },
                    TapeEntry::Cols(cols),
                ) => {
                    let dout = geom.batch_to_channel_major(&grad, filters);
                    let wv = self.view2(w, filters, geom.patch_len());
                    if let Some(g) = param_grads.as_deref_mut() {
                        let dw = dout.dot(&cols.t());
                        add_into(&mut g[w..w + filters * geom.patch_len()], dw.iter());
                        add_into(&mut g[b..b + filters], dout.sum_axis(Axis(1)).iter());
                    }
                    let dcols = wv.t().dot(&dout);
                    geom.col2im_batch(&dcols, batch)
                }
                (
                    &Op::ConvT {
                        w,
                        b,
                        geom,
                        in_channels,
                    },
                    TapeEntry::Input(xin),
                ) => {
                    let dcols = geom.im2col_batch(&grad);
                    let wv = self.view2(w, in_channels, geom.patch_len());
                    if let Some(g) = param_grads.as_deref_mut() {
                        let dw = xin.dot(&dcols.t());
                        add_into(&mut g[w..w + in_channels * geom.patch_len()], dw.iter());
                        let plane = geom.height * geom.width;
                        for c in 0..geom.channels {
                            g[b + c] += grad.slice(s![.., c * plane..(c + 1) * plane]).sum();
                        }
                    }
                    let dx = wv.dot(&dcols);
                    geom.channel_major_to_batch(&dx, batch)
                }
                (&Op::Act(a), TapeEntry::Output(y)) => activate_backward(a, y, grad),
                (
                    &Op::Concat {
                        table, dim, n_in, ..
                    },
                    TapeEntry::Labels(labels),
                ) => {
                    if let Some(g) = param_grads.as_deref_mut() {
                        for (r, &l) in labels.iter().enumerate() {
                            let row = grad.slice(s![r, n_in..]);
                            add_into(&mut g[table + l * dim..table + (l + 1) * dim], row.iter());
                        }
                    }
                    grad.slice(s![.., ..n_in]).to_owned()
                }
                _ => unreachable!("tape entry does not match op"),
            };
        }
        grad
    }

    fn view2(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[offset..offset + rows * cols])
            .expect("param slice")
    }

    fn view1(&self, offset: usize, n: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[offset..offset + n])
    }
}

fn add_into<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn glorot<R: Rng + ?Sized>(w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in w {
        *v = rng.random_range(-limit..limit);
    }
}

fn activate(a: Activation, mut x: Array2<f64>) -> Array2<f64> {
    match a {
        Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        Activation::LeakyRelu => x.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
        Activation::Tanh => x.mapv_inplace(f64::tanh),
        Activation::Sigmoid => x.mapv_inplace(sigmoid),
        Activation::Softmax => {
            for mut row in x.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
        }
    }
    x
}

fn activate_backward(a: Activation, y: &Array2<f64>, mut g: Array2<f64>) -> Array2<f64> {
    match a {
        Activation::Relu => g.zip_mut_with(y, |g, &y| {
            if y <= 0.0 {
                *g = 0.0
            }
        }),
        Activation::LeakyRelu => g.zip_mut_with(y, |g, &y| {
            if y <= 0.0 {
                *g *= LEAKY_SLOPE
            }
        }),
        Activation::Tanh => g.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y),
        Activation::Sigmoid => g.zip_mut_with(y, |g, &y| *g *= y * (1.0 - y)),
        Activation::Softmax => {
            for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                grow.zip_mut_with(&yrow, |g, &y| *g = y * (*g - dot));
            }
        }
    }
    g
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise normalized exponential, shifted by the row max.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    logits
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(x: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Stacks selected rows of `x` into a new matrix.
pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub fn column(x: &Array2<f64>, c: usize) -> Array1<f64> {
    x.column(c).to_owned()
}
