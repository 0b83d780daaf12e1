//! Minimal dense-array engine with reverse-mode automatic differentiation.
//!
//! Exactly the operation set the cells need, in double precision on the CPU.
//! A [`Tape`] records the forward computation; [`Tape::backward`] traverses
//! it in reverse and accumulates gradients for every leaf. Backward closures
//! capture the input values they need, so the tape owns no global state and
//! a fresh tape per training step keeps memory bounded.
//!
//! Spatial ops use "same" zero padding: stride 1 preserves `(H, W)`, stride
//! 2 maps it to `(ceil(H/2), ceil(W/2))`. Average pooling divides by the
//! count of valid (non-padded) cells; max pooling ignores padding.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::OperationKind;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("data length {got} does not match shape product {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("stride must be 1 or 2, got {0}")]
    InvalidStride(usize),
    #[error("operation {0} is not a cell operation")]
    NotACellOp(OperationKind),
    #[error("missing parameter tensors for {0}")]
    MissingParams(OperationKind),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward target must be a scalar")]
    NotScalar,
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("value does not belong to this tape")]
    UnknownValue,
}

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::BadLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn idx4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

}

/// Row-major offset into a `[B, C, H, W]` tensor with the given dims.
fn off4(c: usize, h: usize, w: usize, bi: usize, ci: usize, hi: usize, wi: usize) -> usize {
    ((bi * c + ci) * h + hi) * w + wi
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct TapeNode {
    value: Tensor,
    parents: Vec<ValueId>,
    backward: Option<BackwardFn>,
}

/// Gradients per tape value after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Record of one forward computation.
pub struct Tape {
    nodes: Vec<TapeNode>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<ValueId>, backward: Option<BackwardFn>) -> ValueId {
        self.nodes.push(TapeNode {
            value,
            parents,
            backward,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, vec![], None)
    }

    /// Elementwise sum of two congruent tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of any number of congruent tensors.
    pub fn add_n(&mut self, ids: &[ValueId]) -> Result<ValueId, TensorError> {
        let shape = self.value(ids[0]).shape.clone();
        for &id in ids {
            if self.value(id).shape != shape {
                return Err(TensorError::ShapeMismatch(format!(
                    "add: {:?} vs {:?}",
                    shape,
                    self.value(id).shape
                )));
            }
        }
        let mut out = Tensor::zeros(&shape);
        for &id in ids {
            for (o, v) in out.data.iter_mut().zip(&self.value(id).data) {
                *o += v;
            }
        }
        let n = ids.len();
        Ok(self.push(
            out,
            ids.to_vec(),
            Some(Box::new(move |grad| vec![grad.clone(); n])),
        ))
    }

    /// Elementwise mean of congruent tensors.
    pub fn mean_n(&mut self, ids: &[ValueId]) -> Result<ValueId, TensorError> {
        let sum = self.add_n(ids)?;
        let factor = 1.0 / ids.len() as f64;
        Ok(self.scale_by(sum, factor))
    }

    /// Multiply by a constant.
    pub fn scale_by(&mut self, x: ValueId, factor: f64) -> ValueId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= factor;
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |grad| {
                let mut g = grad.clone();
                for v in &mut g.data {
                    *v *= factor;
                }
                vec![g]
            })),
        )
    }

    /// Concatenate along the channel dimension of 4D tensors.
    pub fn concat_channels(&mut self, ids: &[ValueId]) -> Result<ValueId, TensorError> {
        let first = self.value(ids[0]).shape.clone();
        if first.len() != 4 {
            return Err(TensorError::ShapeMismatch("concat needs 4D inputs".into()));
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(ids.len());
        for &id in ids {
            let s = &self.value(id).shape;
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat: {first:?} vs {s:?}"
                )));
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let mut out = Tensor::zeros(&[b, c_total, h, w]);
        let mut offset = 0;
        for (&id, &c) in ids.iter().zip(&channels) {
            let x = self.value(id);
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            out.data[off4(c_total, h, w, bi, offset + ci, hi, wi)] =
                                x.data[x.idx4(bi, ci, hi, wi)];
                        }
                    }
                }
            }
            offset += c;
        }
        let channels_bw = channels.clone();
        Ok(self.push(
            out,
            ids.to_vec(),
            Some(Box::new(move |grad| {
                let mut grads = Vec::with_capacity(channels_bw.len());
                let mut offset = 0;
                for &c in &channels_bw {
                    let mut g = Tensor::zeros(&[b, c, h, w]);
                    for bi in 0..b {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    g.data[off4(c, h, w, bi, ci, hi, wi)] =
                                        grad.data[grad.idx4(bi, offset + ci, hi, wi)];
                                }
                            }
                        }
                    }
                    grads.push(g);
                    offset += c;
                }
                grads
            })),
        ))
    }

    /// Elementwise activation.
    pub fn activation(&mut self, kind: OperationKind, x: ValueId) -> Result<ValueId, TensorError> {
        let input = self.value(x).clone();
        let (out_data, backward): (Vec<f64>, BackwardFn) = match kind {
            OperationKind::Identity => {
                return Ok(self.push(
                    input.clone(),
                    vec![x],
                    Some(Box::new(|grad| vec![grad.clone()])),
                ));
            }
            OperationKind::Relu => {
                let out: Vec<f64> = input.data.iter().map(|&v| v.max(0.0)).collect();
                let saved = input.clone();
                (
                    out,
                    Box::new(move |grad| {
                        let mut g = grad.clone();
                        for (gv, &xv) in g.data.iter_mut().zip(&saved.data) {
                            if xv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        vec![g]
                    }),
                )
            }
            OperationKind::Sigmoid => {
                let out: Vec<f64> = input
                    .data
                    .iter()
                    .map(|&v| 1.0 / (1.0 + (-v).exp()))
                    .collect();
                let saved = out.clone();
                (
                    out,
                    Box::new(move |grad| {
                        let mut g = grad.clone();
                        for (gv, &y) in g.data.iter_mut().zip(&saved) {
                            *gv *= y * (1.0 - y);
                        }
                        vec![g]
                    }),
                )
            }
            OperationKind::Tanh => {
                let out: Vec<f64> = input.data.iter().map(|&v| v.tanh()).collect();
                let saved = out.clone();
                (
                    out,
                    Box::new(move |grad| {
                        let mut g = grad.clone();
                        for (gv, &y) in g.data.iter_mut().zip(&saved) {
                            *gv *= 1.0 - y * y;
                        }
                        vec![g]
                    }),
                )
            }
            other => return Err(TensorError::NotACellOp(other)),
        };
        let out = Tensor {
            shape: input.shape.clone(),
            data: out_data,
        };
        Ok(self.push(out, vec![x], Some(backward)))
    }

    /// 2D matrix product: `[B, I] x [I, O] -> [B, O]`.
    pub fn matmul(&mut self, x: ValueId, w: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: {xs:?} x {ws:?}"
            )));
        }
        let (batch, inner, outer) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = Tensor::zeros(&[batch, outer]);
        for b in 0..batch {
            for o in 0..outer {
                let mut acc = 0.0;
                for i in 0..inner {
                    acc += xv.data[b * inner + i] * wv.data[i * outer + o];
                }
                out.data[b * outer + o] = acc;
            }
        }
        Ok(self.push(
            out,
            vec![x, w],
            Some(Box::new(move |grad| {
                let mut gx = Tensor::zeros(&[batch, inner]);
                let mut gw = Tensor::zeros(&[inner, outer]);
                for b in 0..batch {
                    for o in 0..outer {
                        let g = grad.data[b * outer + o];
                        for i in 0..inner {
                            gx.data[b * inner + i] += g * wv.data[i * outer + o];
                            gw.data[i * outer + o] += g * xv.data[b * inner + i];
                        }
                    }
                }
                vec![gx, gw]
            })),
        ))
    }

    /// Affine map: `x W + b` with `b` broadcast over the batch.
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let product = self.matmul(x, w)?;
        let ps = self.value(product).shape.clone();
        let bs = self.value(b).shape.clone();
        if bs.len() != 1 || bs[0] != ps[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "dense bias: {bs:?} for output {ps:?}"
            )));
        }
        let (batch, outer) = (ps[0], ps[1]);
        let mut out = self.value(product).clone();
        let bias = self.value(b).clone();
        for bi in 0..batch {
            for o in 0..outer {
                out.data[bi * outer + o] += bias.data[o];
            }
        }
        Ok(self.push(
            out,
            vec![product, b],
            Some(Box::new(move |grad| {
                let mut gb = Tensor::zeros(&[outer]);
                for bi in 0..batch {
                    for o in 0..outer {
                        gb.data[o] += grad.data[bi * outer + o];
                    }
                }
                vec![grad.clone(), gb]
            })),
        ))
    }

    /// Per-channel affine: `y[.., c, ..] = x[.., c, ..] * scale[c] + shift[c]`.
    /// Works on 4D (channel dim 1) and 2D (feature dim 1) tensors.
    pub fn scale_shift(
        &mut self,
        x: ValueId,
        scale: ValueId,
        shift: ValueId,
    ) -> Result<ValueId, TensorError> {
        let xs = self.value(x).shape.clone();
        let channels = match xs.len() {
            4 | 2 => xs[1],
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "scale_shift input rank {}",
                    xs.len()
                )))
            }
        };
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        if sc.shape != [channels] || sh.shape != [channels] {
            return Err(TensorError::ShapeMismatch(format!(
                "scale/shift for {channels} channels: {:?}/{:?}",
                sc.shape, sh.shape
            )));
        }
        let per_channel: usize = if xs.len() == 4 { xs[2] * xs[3] } else { 1 };
        let batch = xs[0];
        let xv = self.value(x).clone();
        let mut out = xv.clone();
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * per_channel;
                for i in 0..per_channel {
                    out.data[base + i] = out.data[base + i] * sc.data[c] + sh.data[c];
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, scale, shift],
            Some(Box::new(move |grad| {
                let mut gx = grad.clone();
                let mut gs = Tensor::zeros(&[channels]);
                let mut gh = Tensor::zeros(&[channels]);
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * per_channel;
                        for i in 0..per_channel {
                            let g = grad.data[base + i];
                            gx.data[base + i] = g * sc.data[c];
                            gs.data[c] += g * xv.data[base + i];
                            gh.data[c] += g;
                        }
                    }
                }
                vec![gx, gs, gh]
            })),
        ))
    }

    /// Depthwise convolution with "same" padding.
    /// `x: [B, C, H, W]`, `w: [C, K, K]`.
    pub fn depthwise_conv(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        dilation: usize,
    ) -> Result<ValueId, TensorError> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::InvalidStride(stride));
        }
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 4 || ws.len() != 3 || ws[0] != xs[1] || ws[1] != ws[2] {
            return Err(TensorError::ShapeMismatch(format!(
                "depthwise: x {xs:?}, w {ws:?}"
            )));
        }
        let (batch, channels, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[1];
        let eff = (k - 1) * dilation + 1;
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + eff).saturating_sub(in_h) / 2;
        let pad_w = ((out_w - 1) * stride + eff).saturating_sub(in_w) / 2;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = Tensor::zeros(&[batch, channels, out_h, out_w]);
        for b in 0..batch {
            for c in 0..channels {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = 0.0;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh * dilation) as isize - pad_h as isize;
                                let iw = (ow * stride + kw * dilation) as isize - pad_w as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < in_h && (iw as usize) < in_w
                                {
                                    acc += wv.data[(c * k + kh) * k + kw]
                                        * xv.data[xv.idx4(b, c, ih as usize, iw as usize)];
                                }
                            }
                        }
                        out.data[off4(channels, out_h, out_w, b, c, oh, ow)] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, w],
            Some(Box::new(move |grad| {
                let mut gx = Tensor::zeros(&[batch, channels, in_h, in_w]);
                let mut gw = Tensor::zeros(&[channels, k, k]);
                for b in 0..batch {
                    for c in 0..channels {
                        for oh in 0..grad.shape[2] {
                            for ow in 0..grad.shape[3] {
                                let g = grad.data[grad.idx4(b, c, oh, ow)];
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let ih =
                                            (oh * stride + kh * dilation) as isize - pad_h as isize;
                                        let iw =
                                            (ow * stride + kw * dilation) as isize - pad_w as isize;
                                        if ih >= 0
                                            && iw >= 0
                                            && (ih as usize) < in_h
                                            && (iw as usize) < in_w
                                        {
                                            gx.data[off4(
                                                channels, in_h, in_w, b, c, ih as usize,
                                                iw as usize,
                                            )] += g * wv.data[(c * k + kh) * k + kw];
                                            gw.data[(c * k + kh) * k + kw] += g
                                                * xv.data[xv.idx4(b, c, ih as usize, iw as usize)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw]
            })),
        ))
    }

    /// Pointwise (1x1) convolution: `x: [B, Cin, H, W]`, `w: [Cout, Cin]`.
    pub fn pointwise_conv(&mut self, x: ValueId, w: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "pointwise: x {xs:?}, w {ws:?}"
            )));
        }
        let (batch, c_in, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = Tensor::zeros(&[batch, c_out, h, w_dim]);
        for b in 0..batch {
            for co in 0..c_out {
                for hi in 0..h {
                    for wi in 0..w_dim {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            acc += wv.data[co * c_in + ci] * xv.data[xv.idx4(b, ci, hi, wi)];
                        }
                        out.data[off4(c_out, h, w_dim, b, co, hi, wi)] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, w],
            Some(Box::new(move |grad| {
                let mut gx = Tensor::zeros(&[batch, c_in, h, w_dim]);
                let mut gw = Tensor::zeros(&[c_out, c_in]);
                for b in 0..batch {
                    for co in 0..c_out {
                        for hi in 0..h {
                            for wi in 0..w_dim {
                                let g = grad.data[grad.idx4(b, co, hi, wi)];
                                for ci in 0..c_in {
                                    gx.data[off4(c_in, h, w_dim, b, ci, hi, wi)] +=
                                        g * wv.data[co * c_in + ci];
                                    gw.data[co * c_in + ci] +=
                                        g * xv.data[xv.idx4(b, ci, hi, wi)];
                                }
                            }
                        }
                    }
                }
                vec![gx, gw]
            })),
        ))
    }

    /// 3x3 max pooling with "same" padding; padding cells are ignored.
    pub fn max_pool3(&mut self, x: ValueId, stride: usize) -> Result<ValueId, TensorError> {
        self.pool3(x, stride, true)
    }

    /// 3x3 average pooling with "same" padding; divides by the valid count.
    pub fn avg_pool3(&mut self, x: ValueId, stride: usize) -> Result<ValueId, TensorError> {
        self.pool3(x, stride, false)
    }

    fn pool3(&mut self, x: ValueId, stride: usize, is_max: bool) -> Result<ValueId, TensorError> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::InvalidStride(stride));
        }
        let xs = self.value(x).shape.clone();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch("pool needs 4D input".into()));
        }
        let (batch, channels, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
        let k = 3;
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + k).saturating_sub(in_h) / 2;
        let pad_w = ((out_w - 1) * stride + k).saturating_sub(in_w) / 2;
        let xv = self.value(x).clone();
        let mut out = Tensor::zeros(&[batch, channels, out_h, out_w]);
        // For max: remember the argmax flat index. For avg: remember counts.
        let mut argmax = vec![0usize; out.data.len()];
        let mut counts = vec![0usize; out.data.len()];
        for b in 0..batch {
            for c in 0..channels {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        let mut sum = 0.0;
                        let mut count = 0;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - pad_h as isize;
                                let iw = (ow * stride + kw) as isize - pad_w as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < in_h && (iw as usize) < in_w
                                {
                                    let idx = xv.idx4(b, c, ih as usize, iw as usize);
                                    let v = xv.data[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                    sum += v;
                                    count += 1;
                                }
                            }
                        }
                        let oidx = out.idx4(b, c, oh, ow);
                        out.data[oidx] = if is_max { best } else { sum / count as f64 };
                        argmax[oidx] = best_idx;
                        counts[oidx] = count;
                    }
                }
            }
        }
        let in_shape = vec![batch, channels, in_h, in_w];
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |grad| {
                let mut gx = Tensor::zeros(&in_shape);
                if is_max {
                    for (oidx, &g) in grad.data.iter().enumerate() {
                        gx.data[argmax[oidx]] += g;
                    }
                } else {
                    let (out_h, out_w) = (grad.shape[2], grad.shape[3]);
                    for b in 0..batch {
                        for c in 0..channels {
                            for oh in 0..out_h {
                                for ow in 0..out_w {
                                    let oidx = grad.idx4(b, c, oh, ow);
                                    let g = grad.data[oidx] / counts[oidx] as f64;
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let ih = (oh * stride + kh) as isize - pad_h as isize;
                                            let iw = (ow * stride + kw) as isize - pad_w as isize;
                                            if ih >= 0
                                                && iw >= 0
                                                && (ih as usize) < in_h
                                                && (iw as usize) < in_w
                                            {
                                                gx.data[off4(
                                                    channels, in_h, in_w, b, c, ih as usize,
                                                    iw as usize,
                                                )] += g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Factorized spatial reduction: keep every second row and column,
    /// mapping `(H, W)` to `(ceil(H/2), ceil(W/2))` without parameters.
    pub fn subsample2(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch("subsample needs 4D input".into()));
        }
        let (batch, channels, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
        let out_h = in_h.div_ceil(2);
        let out_w = in_w.div_ceil(2);
        let xv = self.value(x).clone();
        let mut out = Tensor::zeros(&[batch, channels, out_h, out_w]);
        for b in 0..batch {
            for c in 0..channels {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        out.data[off4(channels, out_h, out_w, b, c, oh, ow)] =
                            xv.data[xv.idx4(b, c, oh * 2, ow * 2)];
                    }
                }
            }
        }
        let in_shape = xs.clone();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |grad| {
                let mut gx = Tensor::zeros(&in_shape);
                let (out_h, out_w) = (grad.shape[2], grad.shape[3]);
                for b in 0..batch {
                    for c in 0..channels {
                        for oh in 0..out_h {
                            for ow in 0..out_w {
                                gx.data[off4(channels, in_h, in_w, b, c, oh * 2, ow * 2)] +=
                                    grad.data[grad.idx4(b, c, oh, ow)];
                            }
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Global average pool: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch("gap needs 4D input".into()));
        }
        let (batch, channels, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let area = (h * w) as f64;
        let xv = self.value(x).clone();
        let mut out = Tensor::zeros(&[batch, channels]);
        for b in 0..batch {
            for c in 0..channels {
                let mut acc = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        acc += xv.data[xv.idx4(b, c, hi, wi)];
                    }
                }
                out.data[b * channels + c] = acc / area;
            }
        }
        let in_shape = xs.clone();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |grad| {
                let mut gx = Tensor::zeros(&in_shape);
                for b in 0..batch {
                    for c in 0..channels {
                        let g = grad.data[b * channels + c] / area;
                        for hi in 0..h {
                            for wi in 0..w {
                                gx.data[off4(channels, h, w, b, c, hi, wi)] = g;
                            }
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Embedding lookup: `table: [V, E]`, one row per index.
    pub fn embedding(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId, TensorError> {
        let ts = self.value(table).shape.clone();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch("embedding table must be 2D".into()));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        for &i in indices {
            if i >= vocab {
                return Err(TensorError::LabelOutOfRange {
                    label: i,
                    classes: vocab,
                });
            }
        }
        let tv = self.value(table).clone();
        let mut out = Tensor::zeros(&[indices.len(), dim]);
        for (row, &i) in indices.iter().enumerate() {
            out.data[row * dim..(row + 1) * dim].copy_from_slice(&tv.data[i * dim..(i + 1) * dim]);
        }
        let saved: Vec<usize> = indices.to_vec();
        Ok(self.push(
            out,
            vec![table],
            Some(Box::new(move |grad| {
                let mut gt = Tensor::zeros(&[vocab, dim]);
                for (row, &i) in saved.iter().enumerate() {
                    for d in 0..dim {
                        gt.data[i * dim + d] += grad.data[row * dim + d];
                    }
                }
                vec![gt]
            })),
        ))
    }

    /// Inverted dropout with a seed-driven mask. `rate` is the drop
    /// probability; kept entries are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: ValueId, rate: f64, rng: &mut R) -> ValueId {
        if rate <= 0.0 {
            let v = self.value(x).clone();
            return self.push(v, vec![x], Some(Box::new(|grad| vec![grad.clone()])));
        }
        let keep = 1.0 - rate;
        let xv = self.value(x).clone();
        let mask: Vec<f64> = xv
            .data
            .iter()
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = xv.clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |grad| {
                let mut g = grad.clone();
                for (gv, m) in g.data.iter_mut().zip(&mask) {
                    *gv *= m;
                }
                vec![g]
            })),
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`. Scalar output.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
    ) -> Result<ValueId, TensorError> {
        let ls = self.value(logits).shape.clone();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cross entropy: logits {ls:?} for {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        for &l in labels {
            if l >= classes {
                return Err(TensorError::LabelOutOfRange { label: l, classes });
            }
        }
        let lv = self.value(logits).clone();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &lv.data[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = max + sum.ln();
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - log_sum).exp();
            }
            loss -= row[labels[b]] - log_sum;
        }
        loss /= batch as f64;
        let saved_labels: Vec<usize> = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |grad| {
                let g = grad.data[0] / batch as f64;
                let mut gl = Tensor::zeros(&[batch, classes]);
                for b in 0..batch {
                    for c in 0..classes {
                        let indicator = if c == saved_labels[b] { 1.0 } else { 0.0 };
                        gl.data[b * classes + c] = g * (probs[b * classes + c] - indicator);
                    }
                }
                vec![gl]
            })),
        ))
    }

    /// Sum of all entries. Scalar output.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let total: f64 = xv.data.iter().sum();
        let shape = xv.shape.clone();
        self.push(
            Tensor::scalar(total),
            vec![x],
            Some(Box::new(move |grad| {
                vec![Tensor::full(&shape, grad.data[0])]
            })),
        )
    }

    /// Reverse-mode accumulation from a scalar loss. Consumes the tape:
    /// a second call is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownValue);
        }
        if !self.nodes[loss.0].value.shape.is_empty() {
            return Err(TensorError::NotScalar);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad_out) = grads[i].clone() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.clone().into_iter().zip(parent_grads) {
                match &mut grads[parent.0] {
                    Some(existing) => {
                        for (e, v) in existing.data.iter_mut().zip(&g.data) {
                            *e += v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Parameters of one cell operation, already registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CellOpParams {
    /// `[C, K, K]` depthwise kernel, convolution ops only.
    pub depthwise: Option<ValueId>,
    /// `[C, C]` pointwise kernel, convolution ops only.
    pub pointwise: Option<ValueId>,
    /// `[C]` per-channel scale, applied after the raw op.
    pub scale: ValueId,
    /// `[C]` per-channel shift.
    pub shift: ValueId,
}

/// Apply one convolutional cell operation.
///
/// Separable convolutions are a depthwise `KxK` followed by a pointwise
/// `1x1`; dilated variants use dilation 2. Identity at stride 2 becomes a
/// factorized spatial reduction. Every op ends with its per-channel
/// scale+shift.
pub fn apply_cell_op(
    tape: &mut Tape,
    kind: OperationKind,
    input: ValueId,
    params: &CellOpParams,
    stride: usize,
) -> Result<ValueId, TensorError> {
    if stride != 1 && stride != 2 {
        return Err(TensorError::InvalidStride(stride));
    }
    let raw = match kind {
        OperationKind::SepConv3x3 | OperationKind::SepConv5x5 => {
            let dw = params.depthwise.ok_or(TensorError::MissingParams(kind))?;
            let pw = params.pointwise.ok_or(TensorError::MissingParams(kind))?;
            let mid = tape.depthwise_conv(input, dw, stride, 1)?;
            tape.pointwise_conv(mid, pw)?
        }
        OperationKind::DilSepConv3x3 | OperationKind::DilSepConv5x5 => {
            let dw = params.depthwise.ok_or(TensorError::MissingParams(kind))?;
            let pw = params.pointwise.ok_or(TensorError::MissingParams(kind))?;
            let mid = tape.depthwise_conv(input, dw, stride, 2)?;
            tape.pointwise_conv(mid, pw)?
        }
        OperationKind::MaxPool3x3 => tape.max_pool3(input, stride)?,
        OperationKind::AvgPool3x3 => tape.avg_pool3(input, stride)?,
        OperationKind::Identity => {
            if stride == 1 {
                input
            } else {
                tape.subsample2(input)?
            }
        }
        other => return Err(TensorError::NotACellOp(other)),
    };
    tape.scale_shift(raw, params.scale, params.shift)
}

/// Kernel size of a convolutional cell operation, if it has one.
pub fn op_kernel_size(kind: OperationKind) -> Option<usize> {
    match kind {
        OperationKind::SepConv3x3 | OperationKind::DilSepConv3x3 => Some(3),
        OperationKind::SepConv5x5 | OperationKind::DilSepConv5x5 => Some(5),
        _ => None,
    }
}
