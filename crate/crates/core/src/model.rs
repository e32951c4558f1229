//! Small architectures and the flat parameter layout.
//!
//! A [`ModelSpec`] is an ordered list of layers plus an offset table mapping
//! every weight and bias tensor into one flat [`ParamVector`]. Dense weights
//! are stored `[inputs, outputs]` so the forward pass is `x · W + b`; conv
//! kernels are `[out, in, 3, 3]`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    /// 3×3 convolution, stride 1, zero padding 1 (spatial size preserved).
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// One contiguous tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Weights are subject to pruning; biases never are.
    pub fn prunable(&self) -> bool {
        self.kind == SegmentKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-example input shape, e.g. `[1, 28, 28]` or `[784]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub segments: Vec<Segment>,
    pub total: usize,
    pub classes: usize,
}

impl ModelSpec {
    /// Builds the offset table, validating that consecutive layers agree on
    /// their extents.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Invalid(format!("bad input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        let mut segments = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Dense { inputs, outputs, bias } => {
                    if shape != [inputs] {
                        return Err(Error::Shape(format!("dense layer {i} expects [{inputs}], got {shape:?}")));
                    }
                    if outputs == 0 {
                        return Err(Error::Invalid(format!("dense layer {i} has no outputs")));
                    }
                    segments.push(Segment { layer: i, kind: SegmentKind::Weight, offset, shape: vec![inputs, outputs], fan_in: inputs });
                    offset += inputs * outputs;
                    if bias {
                        segments.push(Segment { layer: i, kind: SegmentKind::Bias, offset, shape: vec![outputs], fan_in: inputs });
                        offset += outputs;
                    }
                    shape = vec![outputs];
                }
                Layer::Conv3x3 { in_channels, out_channels, height, width } => {
                    if shape != [in_channels, height, width] {
                        return Err(Error::Shape(format!(
                            "conv layer {i} expects [{in_channels}, {height}, {width}], got {shape:?}"
                        )));
                    }
                    let fan_in = in_channels * 9;
                    segments.push(Segment { layer: i, kind: SegmentKind::Weight, offset, shape: vec![out_channels, in_channels, 3, 3], fan_in });
                    offset += out_channels * fan_in;
                    segments.push(Segment { layer: i, kind: SegmentKind::Bias, offset, shape: vec![out_channels], fan_in });
                    offset += out_channels;
                    shape = vec![out_channels, height, width];
                }
                Layer::Relu => {}
                Layer::MaxPool2 | Layer::AvgPool2 => match shape[..] {
                    [c, h, w] if h >= 2 && w >= 2 => shape = vec![c, h / 2, w / 2],
                    _ => return Err(Error::Shape(format!("pool layer {i} on {shape:?}"))),
                },
                Layer::Flatten => shape = vec![shape.iter().product()],
            }
        }
        let classes = match shape[..] {
            [k] => k,
            _ => return Err(Error::Shape(format!("model output {shape:?} is not a vector"))),
        };
        Ok(ModelSpec { input_shape, layers, segments, total: offset, classes })
    }

    pub fn example_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Number of prunable (weight) coordinates.
    pub fn prunable_count(&self) -> usize {
        self.segments.iter().filter(|s| s.prunable()).map(Segment::len).sum()
    }

    /// Per-coordinate prunable flags.
    pub fn prunable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.total];
        for s in &self.segments {
            flags[s.range()].fill(s.prunable());
        }
        flags
    }

    /// Kaiming-uniform weights (bound √(6 / fan_in)), zero biases.
    pub fn initialize(self: &Arc<Self>, seed: u64) -> ParamVector {
        let mut values = vec![0.0f32; self.total];
        let mut rng = rng::stream(seed, Domain::Init, 0);
        for s in self.segments.iter().filter(|s| s.prunable()) {
            let bound = (6.0 / s.fan_in as f64).sqrt() as f32;
            for v in &mut values[s.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector { values, spec: Arc::clone(self) }
    }

    pub fn zeros(self: &Arc<Self>) -> ParamVector {
        ParamVector { values: vec![0.0; self.total], spec: Arc::clone(self) }
    }

    fn segment(&self, layer: usize, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer && s.kind == kind)
    }

    /// Records the forward pass on `tape`, returning the logits node and the
    /// parameter nodes in segment order.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[T],
        inputs: NodeId,
        track_params: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if params.len() != self.total {
            return Err(Error::Shape(format!("{} parameters for a layout of {}", params.len(), self.total)));
        }
        let mut ids = Vec::with_capacity(self.segments.len());
        let mut leaf = |tape: &mut Tape<T>, seg: &Segment| -> Result<NodeId> {
            let t = Tensor::new(seg.shape.clone(), params[seg.range()].to_vec())?;
            let id = if track_params { tape.param(t) } else { tape.constant(t) };
            ids.push(id);
            Ok(id)
        };
        let mut x = inputs;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                Layer::Dense { bias, .. } => {
                    let w = leaf(tape, self.segment(i, SegmentKind::Weight).expect("weight segment"))?;
                    let h = tape.matmul(x, w)?;
                    if bias {
                        let b = leaf(tape, self.segment(i, SegmentKind::Bias).expect("bias segment"))?;
                        tape.add_row_bias(h, b)?
                    } else {
                        h
                    }
                }
                Layer::Conv3x3 { .. } => {
                    let w = leaf(tape, self.segment(i, SegmentKind::Weight).expect("weight segment"))?;
                    let b = leaf(tape, self.segment(i, SegmentKind::Bias).expect("bias segment"))?;
                    let h = tape.conv3x3(x, w, 1)?;
                    tape.add_channel_bias(h, b)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool2 => tape.max_pool2(x)?,
                Layer::AvgPool2 => tape.avg_pool2(x)?,
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok((x, ids))
    }

    /// Wraps a flat `[batch · example_len]` buffer in the model's input shape.
    pub fn input_tensor<T: Scalar>(&self, batch: usize, data: Vec<T>) -> Result<Tensor<T>> {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, data)
    }
}

/// Flat parameters tied to their layout.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f32>,
    spec: Arc<ModelSpec>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && (Arc::ptr_eq(&self.spec, &other.spec) || self.spec == other.spec)
    }
}

impl ParamVector {
    pub fn from_values(spec: &Arc<ModelSpec>, values: Vec<f32>) -> Result<Self> {
        if values.len() != spec.total {
            return Err(Error::Shape(format!("{} values for a layout of {}", values.len(), spec.total)));
        }
        Ok(ParamVector { values, spec: Arc::clone(spec) })
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.spec, &other.spec) || self.spec == other.spec
    }

    /// Structured view of one segment.
    pub fn segment(&self, index: usize) -> &[f32] {
        &self.values[self.spec.segments[index].range()]
    }

    pub fn segment_mut(&mut self, index: usize) -> &mut [f32] {
        let range = self.spec.segments[index].range();
        &mut self.values[range]
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// `784–100–10`-style multilayer perceptron with ReLU between dense layers.
pub fn build_mlp(layer_widths: &[usize], seed: u64) -> Result<(Arc<ModelSpec>, ParamVector)> {
    let spec = Arc::new(mlp_spec(layer_widths)?);
    let params = spec.initialize(seed);
    Ok((spec, params))
}

pub fn mlp_spec(layer_widths: &[usize]) -> Result<ModelSpec> {
    if layer_widths.len() < 2 {
        return Err(Error::Invalid("an MLP needs at least input and output widths".into()));
    }
    if layer_widths.contains(&0) {
        return Err(Error::Invalid(format!("zero width in {layer_widths:?}")));
    }
    let mut layers = Vec::new();
    for (i, pair) in layer_widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { inputs: pair[0], outputs: pair[1], bias: true });
    }
    ModelSpec::from_layers(vec![layer_widths[0]], layers)
}

/// Conv blocks (3×3 conv, ReLU, 2×2 max pool) followed by a dense classifier.
pub fn build_cnn(
    input: (usize, usize, usize),
    conv_channels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<(Arc<ModelSpec>, ParamVector)> {
    let spec = Arc::new(cnn_spec(input, conv_channels, classes)?);
    let params = spec.initialize(seed);
    Ok((spec, params))
}

pub fn cnn_spec(input: (usize, usize, usize), conv_channels: &[usize], classes: usize) -> Result<ModelSpec> {
    let (mut c, mut h, mut w) = input;
    if conv_channels.is_empty() || conv_channels.contains(&0) || classes == 0 {
        return Err(Error::Invalid(format!("bad CNN widths {conv_channels:?} -> {classes}")));
    }
    let mut layers = Vec::new();
    for &out in conv_channels {
        layers.push(Layer::Conv3x3 { in_channels: c, out_channels: out, height: h, width: w });
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        c = out;
        h /= 2;
        w /= 2;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense { inputs: c * h * w, outputs: classes, bias: true });
    ModelSpec::from_layers(vec![input.0, input.1, input.2], layers)
}

/// Logits for a batch of flat inputs.
pub fn logits<T: Scalar>(spec: &ModelSpec, params: &[T], inputs: &[T]) -> Result<Tensor<T>> {
    let n = spec.example_len();
    if !inputs.len().is_multiple_of(n) || inputs.is_empty() {
        return Err(Error::Shape(format!("{} input values for examples of {n}", inputs.len())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(spec.input_tensor(inputs.len() / n, inputs.to_vec())?);
    let (out, _) = spec.forward(&mut tape, params, x, false)?;
    Ok(tape.value(out).clone())
}

/// `softmax(f(w, x))` for a batch whose shape is `[batch, ..input_shape]`.
pub fn predict_probs(params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
    let spec = params.spec();
    if inputs.shape().len() < 2 || inputs.shape()[1..].iter().product::<usize>() != spec.example_len() {
        return Err(Error::Shape(format!("input {:?} for model input {:?}", inputs.shape(), spec.input_shape)));
    }
    let z = logits(spec, params.values(), inputs.data())?;
    crate::tensor::softmax(&z)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_grad<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    inputs: &[T],
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let n = spec.example_len();
    if inputs.len() != labels.len() * n || labels.is_empty() {
        return Err(Error::Shape(format!("{} input values for {} labels", inputs.len(), labels.len())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(spec.input_tensor(labels.len(), inputs.to_vec())?);
    let (z, ids) = spec.forward(&mut tape, params, x, true)?;
    let p = tape.softmax(z)?;
    let loss = tape.cross_entropy(p, labels)?;
    tape.backward(loss)?;
    let mut grad = vec![T::zero(); spec.total];
    for (seg, id) in spec.segments.iter().zip(ids) {
        if let Some(g) = tape.take_grad(id) {
            grad[seg.range()].copy_from_slice(&g);
        }
    }
    Ok((tape.value(loss).data()[0], grad))
}

/// `dLoss/dParams` of the mean cross-entropy over a batch.
pub fn grad(params: &ParamVector, inputs: &Tensor, labels: &[usize]) -> Result<(f32, ParamVector)> {
    let (loss, g) = loss_and_grad(params.spec(), params.values(), inputs.data(), labels)?;
    Ok((loss, ParamVector::from_values(params.spec(), g)?))
}

/// The same gradient evaluated entirely in 64-bit arithmetic.
pub fn grad_f64(spec: &ModelSpec, params: &[f64], inputs: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    loss_and_grad(spec, params, inputs, labels)
}

/// Mean cross-entropy in 64-bit arithmetic, used as the finite-difference oracle.
pub fn loss_f64(spec: &ModelSpec, params: &[f64], inputs: &[f64], labels: &[usize]) -> Result<f64> {
    let z = logits(spec, params, inputs)?;
    let p = crate::tensor::softmax(&z)?;
    crate::tensor::cross_entropy(&p, labels)
}

/// One coordinate of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|, 1e-7)`; the floor keeps near-zero
    /// derivatives from dividing by nothing.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-7)
    }
}

/// Compares the reverse-mode gradient with central differences
/// `[L(w + h·e_i) − L(w − h·e_i)] / 2h` at each requested coordinate.
pub fn gradient_check(spec: &ModelSpec, params: &[f64], inputs: &[f64], labels: &[usize], coords: &[usize], h: f64) -> Result<Vec<GradCheck>> {
    let (_, g) = grad_f64(spec, params, inputs, labels)?;
    let mut w = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            if i >= w.len() {
                return Err(Error::Index(format!("coordinate {i} of {}", w.len())));
            }
            let orig = w[i];
            w[i] = orig + h;
            let up = loss_f64(spec, &w, inputs, labels)?;
            w[i] = orig - h;
            let down = loss_f64(spec, &w, inputs, labels)?;
            w[i] = orig;
            Ok(GradCheck { coordinate: i, analytic: g[i], numeric: (up - down) / (2.0 * h) })
        })
        .collect()
}
