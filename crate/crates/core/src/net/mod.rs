//! Minimal feed-forward network kernel: dense and convolutional layers as
//! matrix multiplication, ReLU activations, per-task linear classifier
//! heads, and reverse-mode gradients of the softmax cross-entropy loss.
//!
//! Every linear layer computes `O = X * w` where `X` is the layer's input
//! feature matrix (rows are samples, or patches for conv layers). When the
//! bias mode is `Augmented`, a constant-1 column is appended to `X` and the
//! bias lives in the last row of `w`, so bias parameters are covered by the
//! same feature covariance as the rest of the layer.

mod conv;

pub use conv::{col2im, conv_output_dims, im2col, Batch4};

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul, transpose, Matrix};

/// How a linear layer handles its bias term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// Append a constant-1 column to the input features; the bias is the
    /// last weight row and is projected like any other parameter.
    Augmented,
    /// No bias.
    None,
}

/// One layer of the shared trunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        bias: BiasMode,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        bias: BiasMode,
    },
    Relu,
}

impl LayerSpec {
    pub fn is_linear(&self) -> bool {
        !matches!(self, LayerSpec::Relu)
    }
}

/// Shape of a single sample at the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    Spatial { channels: usize, height: usize, width: usize },
}

/// A batch of features flowing through the network: flat rows for dense
/// layers, 4-D maps for convolutional ones.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureBatch {
    Flat(Matrix),
    Spatial(Batch4),
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        match self {
            FeatureBatch::Flat(m) => m.rows(),
            FeatureBatch::Spatial(b) => b.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `idx`, in order, as a new batch.
    pub fn select(&self, idx: &[usize]) -> FeatureBatch {
        match self {
            FeatureBatch::Flat(m) => {
                let mut out = Matrix::zeros(idx.len(), m.cols());
                for (r, &s) in idx.iter().enumerate() {
                    for c in 0..m.cols() {
                        out.set(r, c, m.get(s, c));
                    }
                }
                FeatureBatch::Flat(out)
            }
            FeatureBatch::Spatial(b) => FeatureBatch::Spatial(b.select_samples(idx)),
        }
    }

    fn relu(&self) -> FeatureBatch {
        match self {
            FeatureBatch::Flat(m) => FeatureBatch::Flat(m.map(|v| v.max(0.0))),
            FeatureBatch::Spatial(b) => FeatureBatch::Spatial(b.map(|v| v.max(0.0))),
        }
    }
}

/// Network architecture: the shared trunk plus the bias mode of the
/// per-task heads. Head output sizes are fixed per task when the head is
/// created.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub head_bias: BiasMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Flat(usize),
    Spatial { c: usize, h: usize, w: usize },
}

impl Shape {
    fn flat_dim(self) -> usize {
        match self {
            Shape::Flat(d) => d,
            Shape::Spatial { c, h, w } => c * h * w,
        }
    }
}

fn aug_cols(bias: BiasMode) -> usize {
    match bias {
        BiasMode::Augmented => 1,
        BiasMode::None => 0,
    }
}

/// Walks the layer list from the input shape, validating every transition
/// and returning each linear layer's weight shape plus the flattened
/// feature dimension entering the head.
fn shape_flow(input: InputShape, layers: &[LayerSpec]) -> Result<(Vec<(usize, usize)>, usize)> {
    let mut cur = match input {
        InputShape::Flat(d) => Shape::Flat(d),
        InputShape::Spatial { channels, height, width } => Shape::Spatial {
            c: channels,
            h: height,
            w: width,
        },
    };
    let mut weight_shapes = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { in_dim, out_dim, bias } => {
                let have = cur.flat_dim();
                if have != in_dim {
                    return Err(Error::Config(format!(
                        "layer {i}: dense expects {in_dim} inputs but receives {have}"
                    )));
                }
                weight_shapes.push((in_dim + aug_cols(bias), out_dim));
                cur = Shape::Flat(out_dim);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                bias,
            } => {
                let (c, h, w) = match cur {
                    Shape::Spatial { c, h, w } => (c, h, w),
                    Shape::Flat(_) => {
                        return Err(Error::Config(format!(
                            "layer {i}: conv layer requires spatial input"
                        )))
                    }
                };
                if c != in_channels {
                    return Err(Error::Config(format!(
                        "layer {i}: conv expects {in_channels} channels but receives {c}"
                    )));
                }
                let (oh, ow) = conv_output_dims(h, w, kernel_h, kernel_w, stride)
                    .map_err(|_| {
                        Error::Config(format!(
                            "layer {i}: conv {kernel_h}x{kernel_w}/{stride} has no valid patch position on {h}x{w} input"
                        ))
                    })?;
                weight_shapes.push((in_channels * kernel_h * kernel_w + aug_cols(bias), out_channels));
                cur = Shape::Spatial { c: out_channels, h: oh, w: ow };
            }
            LayerSpec::Relu => {}
        }
    }
    Ok((weight_shapes, cur.flat_dim()))
}

/// Network parameters: trunk weights shared across tasks plus one linear
/// head per task. Heads are frozen once their task finishes and are never
/// modified afterwards.
#[derive(Debug, Clone)]
pub struct NetworkState {
    input: InputShape,
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    heads: BTreeMap<usize, Matrix>,
    frozen: BTreeSet<usize>,
    head_bias: BiasMode,
    feature_dim: usize,
    seed: u64,
}

impl NetworkState {
    /// Builds the trunk with seeded uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        let (weight_shapes, feature_dim) = shape_flow(config.input, &config.layers)?;
        let weights = weight_shapes
            .iter()
            .enumerate()
            .map(|(li, &(r, c))| init_weight(r, c, seed, li as u64 + 1))
            .collect();
        Ok(Self {
            input: config.input,
            layers: config.layers.clone(),
            weights,
            heads: BTreeMap::new(),
            frozen: BTreeSet::new(),
            head_bias: config.head_bias,
            feature_dim,
            seed,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn head_bias(&self) -> BiasMode {
        self.head_bias
    }

    /// Flattened feature dimension entering the heads (before augmentation).
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn linear_layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn head(&self, task: usize) -> Result<&Matrix> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::Data(format!("unknown task id {task}: no head")))
    }

    /// Mutable access to a head; refused for frozen heads so finished tasks
    /// can never be touched by later training.
    pub fn head_mut(&mut self, task: usize) -> Result<&mut Matrix> {
        if self.frozen.contains(&task) {
            return Err(Error::Logic(format!("head for task {task} is frozen")));
        }
        self.heads
            .get_mut(&task)
            .ok_or_else(|| Error::Data(format!("unknown task id {task}: no head")))
    }

    pub fn add_head(&mut self, task: usize, classes: usize) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::Logic(format!("head for task {task} already exists")));
        }
        let rows = self.feature_dim + aug_cols(self.head_bias);
        self.heads
            .insert(task, init_weight(rows, classes, self.seed, 10_000 + task as u64));
        Ok(())
    }

    pub fn freeze_head(&mut self, task: usize) -> Result<()> {
        if !self.heads.contains_key(&task) {
            return Err(Error::Data(format!("unknown task id {task}: no head")));
        }
        self.frozen.insert(task);
        Ok(())
    }

    pub fn is_frozen(&self, task: usize) -> bool {
        self.frozen.contains(&task)
    }

    pub fn head_tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.keys().copied()
    }

    pub fn head_classes(&self, task: usize) -> Result<usize> {
        Ok(self.head(task)?.cols())
    }
}

fn init_weight(rows: usize, cols: usize, seed: u64, stream: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::new(rows, cols, data)
}

/// Per-layer record of one forward pass.
#[derive(Debug, Clone)]
pub enum TraceEntry {
    Dense {
        /// Input features, augmented column included when configured.
        x: Matrix,
        /// Pre-activation `x * w`.
        o: Matrix,
        /// Spatial shape the input was flattened from, if any.
        reshaped_from: Option<(usize, usize, usize, usize)>,
    },
    Conv {
        /// Patch matrix from im2col, augmented column included when configured.
        x: Matrix,
        /// Pre-activation `x * w`, rows aligned with patch rows.
        o: Matrix,
        in_shape: (usize, usize, usize, usize),
        out_shape: (usize, usize, usize, usize),
    },
    Relu {
        /// Values entering the activation, kept for the backward mask.
        input: FeatureBatch,
    },
}

/// Captured activations of one forward pass; owns everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub entries: Vec<TraceEntry>,
    /// Features entering the head, augmented column included when configured.
    pub head_input: Matrix,
    head_reshaped_from: Option<(usize, usize, usize, usize)>,
    pub logits: Matrix,
    pub task: usize,
}

impl ForwardTrace {
    /// Input feature matrix `X^l` of every linear layer, in layer order.
    pub fn linear_inputs(&self) -> Vec<&Matrix> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                TraceEntry::Dense { x, .. } | TraceEntry::Conv { x, .. } => Some(x),
                TraceEntry::Relu { .. } => None,
            })
            .collect()
    }

    /// Pre-activation matrix `O^l` of every linear layer, in layer order.
    pub fn linear_preactivations(&self) -> Vec<&Matrix> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                TraceEntry::Dense { o, .. } | TraceEntry::Conv { o, .. } => Some(o),
                TraceEntry::Relu { .. } => None,
            })
            .collect()
    }
}

fn augment(m: Matrix, bias: BiasMode) -> Matrix {
    match bias {
        BiasMode::None => m,
        BiasMode::Augmented => {
            let mut out = Matrix::zeros(m.rows(), m.cols() + 1);
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    out.set(r, c, m.get(r, c));
                }
                out.set(r, m.cols(), 1.0);
            }
            out
        }
    }
}

fn strip_aug(m: &Matrix, bias: BiasMode) -> Matrix {
    match bias {
        BiasMode::None => m.clone(),
        BiasMode::Augmented => {
            let mut out = Matrix::zeros(m.rows(), m.cols() - 1);
            for r in 0..m.rows() {
                for c in 0..out.cols() {
                    out.set(r, c, m.get(r, c));
                }
            }
            out
        }
    }
}

fn check_input_shape(net: &NetworkState, x: &FeatureBatch) -> Result<()> {
    match (net.input, x) {
        (InputShape::Flat(d), FeatureBatch::Flat(m)) if m.cols() == d => Ok(()),
        (InputShape::Spatial { channels, height, width }, FeatureBatch::Spatial(b))
            if (b.c, b.h, b.w) == (channels, height, width) =>
        {
            Ok(())
        }
        _ => Err(Error::Shape("input batch does not match network input shape".into())),
    }
}

/// Forward pass for `task`, recording `X^l` and `O^l` at every linear layer.
pub fn forward(net: &NetworkState, x: &FeatureBatch, task: usize) -> Result<ForwardTrace> {
    let head = net.head(task)?;
    check_input_shape(net, x)?;

    let mut cur = x.clone();
    let mut entries = Vec::with_capacity(net.layers.len());
    let mut li = 0usize;
    for layer in &net.layers {
        match *layer {
            LayerSpec::Dense { in_dim, out_dim: _, bias } => {
                let (flat, reshaped_from) = match cur {
                    FeatureBatch::Flat(m) => (m, None),
                    FeatureBatch::Spatial(b) => {
                        let shape = (b.n, b.c, b.h, b.w);
                        (b.flatten(), Some(shape))
                    }
                };
                if flat.cols() != in_dim {
                    return Err(Error::Shape(format!(
                        "dense layer expects width {in_dim}, got {}",
                        flat.cols()
                    )));
                }
                let x_aug = augment(flat, bias);
                let o = matmul(&x_aug, &net.weights[li])?;
                cur = FeatureBatch::Flat(o.clone());
                entries.push(TraceEntry::Dense { x: x_aug, o, reshaped_from });
                li += 1;
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, bias } => {
                let b = match cur {
                    FeatureBatch::Spatial(b) => b,
                    FeatureBatch::Flat(_) => {
                        return Err(Error::Shape("conv layer received flat features".into()))
                    }
                };
                if b.c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv layer expects {in_channels} channels, got {}",
                        b.c
                    )));
                }
                let patches = im2col(&b, kernel_h, kernel_w, stride, bias)?;
                let o = matmul(&patches, &net.weights[li])?;
                let (oh, ow) = conv_output_dims(b.h, b.w, kernel_h, kernel_w, stride)?;
                let mut out_map = Batch4::zeros(b.n, out_channels, oh, ow);
                for s in 0..b.n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let r = (s * oh + oy) * ow + ox;
                            for ch in 0..out_channels {
                                out_map.set(s, ch, oy, ox, o.get(r, ch));
                            }
                        }
                    }
                }
                let in_shape = (b.n, b.c, b.h, b.w);
                let out_shape = (b.n, out_channels, oh, ow);
                cur = FeatureBatch::Spatial(out_map);
                entries.push(TraceEntry::Conv { x: patches, o, in_shape, out_shape });
                li += 1;
            }
            LayerSpec::Relu => {
                entries.push(TraceEntry::Relu { input: cur.clone() });
                cur = cur.relu();
            }
        }
    }

    let (feat, head_reshaped_from) = match cur {
        FeatureBatch::Flat(m) => (m, None),
        FeatureBatch::Spatial(b) => {
            let shape = (b.n, b.c, b.h, b.w);
            (b.flatten(), Some(shape))
        }
    };
    let head_input = augment(feat, net.head_bias);
    let logits = matmul(&head_input, head)?;
    Ok(ForwardTrace { entries, head_input, head_reshaped_from, logits, task })
}

/// Raw gradients of the mean softmax cross-entropy loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One gradient per linear trunk layer, shaped like its weight matrix.
    pub shared: Vec<Matrix>,
    /// Gradient of the active head.
    pub head: Matrix,
    pub loss: f64,
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let k = logits.cols();
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    let mut dlogits = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for r in 0..n {
        let label = labels[r];
        if label >= k {
            return Err(Error::Data(format!(
                "label {label} out of range for {k} classes (row {r})"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += denom.ln() + max - row[label];
        for c in 0..k {
            let p = (row[c] - max).exp() / denom;
            let target = if c == label { 1.0 } else { 0.0 };
            dlogits.set(r, c, (p - target) / n as f64);
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, dlogits))
}

/// Reverse-mode gradients for the trace's batch and labels.
pub fn backward(net: &NetworkState, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    let head = net.head(trace.task)?;
    let (loss, dlogits) = softmax_ce(&trace.logits, labels)?;

    let head_grad = matmul(&transpose(&trace.head_input), &dlogits)?;
    let dfeat_aug = matmul(&dlogits, &transpose(head))?;
    let dfeat = strip_aug(&dfeat_aug, net.head_bias);
    let mut dcur = match trace.head_reshaped_from {
        Some((_, c, h, w)) => FeatureBatch::Spatial(Batch4::from_matrix(&dfeat, c, h, w)),
        None => FeatureBatch::Flat(dfeat),
    };

    let mut shared: Vec<Option<Matrix>> = vec![None; net.weights.len()];
    let mut li = net.weights.len();
    for (layer, entry) in net.layers.iter().zip(&trace.entries).rev() {
        match (layer, entry) {
            (&LayerSpec::Dense { bias, .. }, TraceEntry::Dense { x, reshaped_from, .. }) => {
                li -= 1;
                let d_o = match dcur {
                    FeatureBatch::Flat(m) => m,
                    FeatureBatch::Spatial(_) => {
                        return Err(Error::Shape("dense backward received spatial gradient".into()))
                    }
                };
                shared[li] = Some(matmul(&transpose(x), &d_o)?);
                let dx_aug = matmul(&d_o, &transpose(&net.weights[li]))?;
                let dx = strip_aug(&dx_aug, bias);
                dcur = match *reshaped_from {
                    Some((_, c, h, w)) => FeatureBatch::Spatial(Batch4::from_matrix(&dx, c, h, w)),
                    None => FeatureBatch::Flat(dx),
                };
            }
            (
                &LayerSpec::Conv2d { kernel_h, kernel_w, stride, bias, .. },
                TraceEntry::Conv { x, in_shape, out_shape, .. },
            ) => {
                li -= 1;
                let d_map = match dcur {
                    FeatureBatch::Spatial(b) => b,
                    FeatureBatch::Flat(_) => {
                        return Err(Error::Shape("conv backward received flat gradient".into()))
                    }
                };
                let (n, oc, oh, ow) = *out_shape;
                let mut d_o = Matrix::zeros(n * oh * ow, oc);
                for s in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let r = (s * oh + oy) * ow + ox;
                            for ch in 0..oc {
                                d_o.set(r, ch, d_map.get(s, ch, oy, ox));
                            }
                        }
                    }
                }
                shared[li] = Some(matmul(&transpose(x), &d_o)?);
                let d_patches_aug = matmul(&d_o, &transpose(&net.weights[li]))?;
                let d_patches = strip_aug(&d_patches_aug, bias);
                let (_, ic, ih, iw) = *in_shape;
                dcur = FeatureBatch::Spatial(col2im(
                    &d_patches, n, ic, ih, iw, kernel_h, kernel_w, stride,
                )?);
            }
            (LayerSpec::Relu, TraceEntry::Relu { input }) => {
                dcur = match (&dcur, input) {
                    (FeatureBatch::Flat(d), FeatureBatch::Flat(pre)) => {
                        let mut m = d.clone();
                        for r in 0..m.rows() {
                            for c in 0..m.cols() {
                                if pre.get(r, c) <= 0.0 {
                                    m.set(r, c, 0.0);
                                }
                            }
                        }
                        FeatureBatch::Flat(m)
                    }
                    (FeatureBatch::Spatial(d), FeatureBatch::Spatial(pre)) => {
                        let masked: Vec<f64> = d
                            .data()
                            .iter()
                            .zip(pre.data())
                            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                            .collect();
                        FeatureBatch::Spatial(Batch4::new(d.n, d.c, d.h, d.w, masked))
                    }
                    _ => return Err(Error::Shape("relu backward shape mismatch".into())),
                };
            }
            _ => return Err(Error::Logic("trace does not match network layers".into())),
        }
    }

    let shared = shared
        .into_iter()
        .map(|g| g.ok_or_else(|| Error::Logic("missing gradient for a linear layer".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients { shared, head: head_grad, loss })
}

/// Argmax class per sample; ties resolve to the lowest class index.
pub fn predict(net: &NetworkState, x: &FeatureBatch, task: usize) -> Result<Vec<usize>> {
    let trace = forward(net, x, task)?;
    Ok(argmax_rows(&trace.logits))
}

pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of the batch without computing gradients.
pub fn batch_loss(net: &NetworkState, x: &FeatureBatch, labels: &[usize], task: usize) -> Result<f64> {
    let trace = forward(net, x, task)?;
    let (loss, _) = softmax_ce(&trace.logits, labels)?;
    Ok(loss)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(net: &NetworkState, x: &FeatureBatch, labels: &[usize], task: usize) -> Result<f64> {
    let preds = predict(net, x, task)?;
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for {} samples",
            labels.len(),
            preds.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len().max(1) as f64)
}
