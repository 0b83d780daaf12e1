//! Weight-shared supernet: one parameter store covering every
//! (cell kind, edge, operation) triple, with child models realized as views
//! that touch only their sampled triples.
//!
//! Normal and reduction cells keep separate weights, mirroring their
//! separate policy vectors. In reduction cells, stride 2 applies to edges
//! sourced at the cell inputs; internal edges run at stride 1, which keeps
//! every node at the reduced resolution.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{
    ArchitectureSample, CellKind, CellTemplate, EdgeId, OperationKind, SearchSpaceError,
};
use crate::tensor::{
    apply_cell_op, op_kernel_size, CellOpParams, Tape, Tensor, TensorError, ValueId,
};

#[derive(Debug, Error)]
pub enum SupernetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Space(#[from] SearchSpaceError),
    #[error("sample failed validation: {0}")]
    InvalidSample(String),
    #[error("missing parameter {0:?}")]
    MissingParam(ParamId),
    #[error("batch of {got} inputs does not match {expected} labels")]
    BatchMismatch { expected: usize, got: usize },
    #[error("non-finite loss encountered")]
    NonFiniteLoss,
}

/// Which tensor of a parameter group.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ParamPart {
    Depthwise,
    Pointwise,
    Scale,
    Shift,
    Weight,
    Bias,
}

/// Key of one tensor in the shared store.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ParamId {
    /// Parameters of a searchable cell operation.
    CellOp {
        cell: CellKind,
        edge: EdgeId,
        op: OperationKind,
        part: ParamPart,
    },
    /// Image stem: pointwise projection to the cell width.
    Stem,
    /// Per-position 1x1 projection of cell input `slot` (0 or 1).
    Preprocess { position: usize, slot: usize },
    HeadWeight,
    HeadBias,
    /// Token embedding table (recurrent).
    Embedding,
    /// Affine maps of the fixed first hidden node: slot 0 consumes the cell
    /// input, slot 1 the previous hidden state.
    InputTransform { slot: usize },
    InputBias,
}

/// The supernet parameter store. Momentum buffers live beside the weights so
/// checkpoints capture the full optimizer state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SharedWeights {
    #[serde(with = "crate::serde_pairs")]
    pub params: BTreeMap<ParamId, Tensor>,
    #[serde(with = "crate::serde_pairs")]
    pub momentum: BTreeMap<ParamId, Tensor>,
}

impl SharedWeights {
    pub fn get(&self, id: ParamId) -> Result<&Tensor, SupernetError> {
        self.params.get(&id).ok_or(SupernetError::MissingParam(id))
    }

    /// Distinct `(cell, edge, op)` triples that own at least one tensor.
    pub fn cell_op_triples(&self) -> usize {
        self.params
            .keys()
            .filter(|k| {
                matches!(
                    k,
                    ParamId::CellOp {
                        part: ParamPart::Scale,
                        ..
                    }
                )
            })
            .count()
    }

    /// One SGD update, optionally with (Nesterov) momentum, applied to the
    /// given gradients only. Untouched entries are not visited at all.
    pub fn sgd_step(
        &mut self,
        grads: &BTreeMap<ParamId, Tensor>,
        lr: f64,
        momentum: Option<f64>,
        nesterov: bool,
    ) {
        for (&id, grad) in grads {
            let w = self.params.get_mut(&id).expect("gradient for known param");
            match momentum {
                Some(mu) => {
                    let buf = self
                        .momentum
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(&grad.shape));
                    for (b, g) in buf.data.iter_mut().zip(&grad.data) {
                        *b = mu * *b + g;
                    }
                    for ((wv, g), b) in w.data.iter_mut().zip(&grad.data).zip(&buf.data) {
                        let d = if nesterov { g + mu * b } else { *b };
                        *wv -= lr * d;
                    }
                }
                None => {
                    for (wv, g) in w.data.iter_mut().zip(&grad.data) {
                        *wv -= lr * g;
                    }
                }
            }
        }
    }
}

/// Stacking plan and widths of the convolutional network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetworkConfig {
    /// Per-node channel width inside every cell.
    pub channels: usize,
    /// Normal cells per stage; stages are separated by reduction cells.
    pub cells_per_stage: usize,
    pub num_reduction: usize,
    pub input_channels: usize,
    pub input_hw: usize,
    pub num_classes: usize,
}

/// One sampled conv child: an architecture per searched cell kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvChildView {
    pub normal: ArchitectureSample,
    pub reduction: ArchitectureSample,
}

/// The convolutional supernet: templates, stacking config, shared store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSupernet {
    pub normal: CellTemplate,
    pub reduction: CellTemplate,
    pub config: ConvNetworkConfig,
    pub weights: SharedWeights,
}

/// Leaf registration cache: each parameter becomes at most one tape leaf per
/// forward pass, so gradients accumulate across all its uses.
struct LeafMap<'a> {
    weights: &'a SharedWeights,
    leaves: BTreeMap<ParamId, ValueId>,
}

impl<'a> LeafMap<'a> {
    fn new(weights: &'a SharedWeights) -> LeafMap<'a> {
        LeafMap {
            weights,
            leaves: BTreeMap::new(),
        }
    }

    fn get(&mut self, tape: &mut Tape, id: ParamId) -> Result<ValueId, SupernetError> {
        if let Some(&v) = self.leaves.get(&id) {
            return Ok(v);
        }
        let tensor = self.weights.get(id)?.clone();
        let v = tape.leaf(tensor);
        self.leaves.insert(id, v);
        Ok(v)
    }
}

fn cell_op_id(cell: CellKind, edge: EdgeId, op: OperationKind, part: ParamPart) -> ParamId {
    ParamId::CellOp {
        cell,
        edge,
        op,
        part,
    }
}

impl ConvSupernet {
    /// Allocate every parameter deterministically from the seed.
    pub fn build(
        num_nodes: usize,
        op_set: Vec<OperationKind>,
        config: ConvNetworkConfig,
        seed: u64,
    ) -> Result<ConvSupernet, SupernetError> {
        let normal = CellTemplate::conv(CellKind::ConvNormal, num_nodes, op_set.clone())?;
        let reduction = CellTemplate::conv(CellKind::ConvReduction, num_nodes, op_set)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut params = BTreeMap::new();
        params.insert(
            ParamId::Stem,
            Tensor::uniform_init(&[c, config.input_channels], config.input_channels, &mut rng),
        );
        for template in [&normal, &reduction] {
            for edge in template.all_edges() {
                for &op in &template.op_set {
                    if let Some(k) = op_kernel_size(op) {
                        params.insert(
                            cell_op_id(template.kind, edge, op, ParamPart::Depthwise),
                            Tensor::uniform_init(&[c, k, k], k * k, &mut rng),
                        );
                        params.insert(
                            cell_op_id(template.kind, edge, op, ParamPart::Pointwise),
                            Tensor::uniform_init(&[c, c], c, &mut rng),
                        );
                    }
                    // Scale starts at 1 and shift at 0 so identity is exact.
                    params.insert(
                        cell_op_id(template.kind, edge, op, ParamPart::Scale),
                        Tensor::full(&[c], 1.0),
                    );
                    params.insert(
                        cell_op_id(template.kind, edge, op, ParamPart::Shift),
                        Tensor::zeros(&[c]),
                    );
                }
            }
        }
        let layout = Self::layout_for(&config);
        let out_width = (num_nodes - 2) * c;
        let mut widths = (c, c); // (prev_prev, prev), starting from the stem
        for (position, _) in layout.iter().enumerate() {
            for (slot, w_in) in [widths.0, widths.1].into_iter().enumerate() {
                params.insert(
                    ParamId::Preprocess { position, slot },
                    Tensor::uniform_init(&[c, w_in], w_in, &mut rng),
                );
            }
            widths = (widths.1, out_width);
        }
        params.insert(
            ParamId::HeadWeight,
            Tensor::uniform_init(&[out_width, config.num_classes], out_width, &mut rng),
        );
        params.insert(ParamId::HeadBias, Tensor::zeros(&[config.num_classes]));
        Ok(ConvSupernet {
            normal,
            reduction,
            config,
            weights: SharedWeights {
                params,
                momentum: BTreeMap::new(),
            },
        })
    }

    /// Cell sequence: `cells_per_stage` normal cells per stage with one
    /// reduction cell between consecutive stages.
    pub fn layout_for(config: &ConvNetworkConfig) -> Vec<CellKind> {
        let mut layout = Vec::new();
        for stage in 0..=config.num_reduction {
            layout.extend(std::iter::repeat_n(CellKind::ConvNormal, config.cells_per_stage));
            if stage < config.num_reduction {
                layout.push(CellKind::ConvReduction);
            }
        }
        layout
    }

    fn check_sample(&self, sample: &ArchitectureSample) -> Result<(), SupernetError> {
        let template = match sample.kind {
            CellKind::ConvNormal => &self.normal,
            CellKind::ConvReduction => &self.reduction,
            CellKind::Recurrent => {
                return Err(SupernetError::InvalidSample("recurrent sample".into()))
            }
        };
        let report = template.validate(sample);
        if !report.is_valid() {
            return Err(SupernetError::InvalidSample(format!("{:?}", report.violations)));
        }
        Ok(())
    }

    /// Run one cell on two same-width inputs already projected to the cell
    /// channel count. Returns the channel-concat of the hidden nodes.
    fn cell_forward(
        &self,
        tape: &mut Tape,
        leaves: &mut LeafMap,
        sample: &ArchitectureSample,
        x0: ValueId,
        x1: ValueId,
    ) -> Result<ValueId, SupernetError> {
        let reduction = sample.kind == CellKind::ConvReduction;
        let mut node_vals: BTreeMap<usize, ValueId> = BTreeMap::new();
        node_vals.insert(0, x0);
        node_vals.insert(1, x1);
        for assignment in &sample.assignments {
            let mut terms = Vec::with_capacity(assignment.edges.len());
            for (&edge, &op) in assignment.edges.iter().zip(&assignment.ops) {
                let stride = if reduction && edge.src < 2 { 2 } else { 1 };
                let params = CellOpParams {
                    depthwise: op_kernel_size(op)
                        .map(|_| leaves.get(tape, cell_op_id(sample.kind, edge, op, ParamPart::Depthwise)))
                        .transpose()?,
                    pointwise: op_kernel_size(op)
                        .map(|_| leaves.get(tape, cell_op_id(sample.kind, edge, op, ParamPart::Pointwise)))
                        .transpose()?,
                    scale: leaves.get(tape, cell_op_id(sample.kind, edge, op, ParamPart::Scale))?,
                    shift: leaves.get(tape, cell_op_id(sample.kind, edge, op, ParamPart::Shift))?,
                };
                let src = *node_vals
                    .get(&edge.src)
                    .ok_or_else(|| SupernetError::InvalidSample(format!("edge {edge}")))?;
                terms.push(apply_cell_op(tape, op, src, &params, stride)?);
            }
            node_vals.insert(assignment.node, tape.add_n(&terms)?);
        }
        let hidden: Vec<ValueId> = (2..self.normal.num_nodes)
            .map(|n| node_vals[&n])
            .collect();
        Ok(tape.concat_channels(&hidden)?)
    }

    /// Whole-network forward: stem, stacked cells, global average pool,
    /// dense head. Returns the logits and the registered parameter leaves.
    fn forward<'a>(
        &'a self,
        tape: &mut Tape,
        view: &ConvChildView,
        images: &Tensor,
    ) -> Result<(ValueId, LeafMap<'a>), SupernetError> {
        self.check_sample(&view.normal)?;
        self.check_sample(&view.reduction)?;
        let mut leaves = LeafMap::new(&self.weights);
        let input = tape.leaf(images.clone());
        let stem_w = leaves.get(tape, ParamId::Stem)?;
        let stem = tape.pointwise_conv(input, stem_w)?;
        // Track (value, spatial size) for the two running cell inputs.
        let hw = self.config.input_hw;
        let mut prev_prev = (stem, hw);
        let mut prev = (stem, hw);
        for (position, kind) in Self::layout_for(&self.config).into_iter().enumerate() {
            // After a reduction the older input lags in resolution.
            let mut in0 = prev_prev;
            if in0.1 > prev.1 {
                in0 = (tape.subsample2(in0.0)?, prev.1);
            }
            let p0 = leaves.get(tape, ParamId::Preprocess { position, slot: 0 })?;
            let p1 = leaves.get(tape, ParamId::Preprocess { position, slot: 1 })?;
            let x0 = tape.pointwise_conv(in0.0, p0)?;
            let x1 = tape.pointwise_conv(prev.0, p1)?;
            let sample = match kind {
                CellKind::ConvReduction => &view.reduction,
                _ => &view.normal,
            };
            let out = self.cell_forward(tape, &mut leaves, sample, x0, x1)?;
            let out_hw = if kind == CellKind::ConvReduction {
                prev.1.div_ceil(2)
            } else {
                prev.1
            };
            prev_prev = prev;
            prev = (out, out_hw);
        }
        let pooled = tape.global_avg_pool(prev.0)?;
        let head_w = leaves.get(tape, ParamId::HeadWeight)?;
        let head_b = leaves.get(tape, ParamId::HeadBias)?;
        let logits = tape.dense(pooled, head_w, head_b)?;
        Ok((logits, leaves))
    }

    /// Forward-only logits for a batch of images.
    pub fn forward_conv_child(
        &self,
        view: &ConvChildView,
        images: &Tensor,
    ) -> Result<Tensor, SupernetError> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, view, images)?;
        Ok(tape.value(logits).clone())
    }

    /// Run one cell standalone on explicit inputs (shape diagnostics).
    pub fn run_cell(
        &self,
        sample: &ArchitectureSample,
        x0: &Tensor,
        x1: &Tensor,
    ) -> Result<Tensor, SupernetError> {
        self.check_sample(sample)?;
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&self.weights);
        let a = tape.leaf(x0.clone());
        let b = tape.leaf(x1.clone());
        let out = self.cell_forward(&mut tape, &mut leaves, sample, a, b)?;
        Ok(tape.value(out).clone())
    }

    /// One training step on the shared weights: forward, cross-entropy,
    /// backward, SGD update of exactly the parameters this sample touched.
    pub fn child_sgd_step(
        &mut self,
        view: &ConvChildView,
        images: &Tensor,
        labels: &[usize],
        lr: f64,
        momentum: Option<f64>,
        nesterov: bool,
    ) -> Result<f64, SupernetError> {
        if images.shape[0] != labels.len() {
            return Err(SupernetError::BatchMismatch {
                expected: labels.len(),
                got: images.shape[0],
            });
        }
        let mut tape = Tape::new();
        let (logits, leaves) = self.forward(&mut tape, view, images)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).data[0];
        if !loss_value.is_finite() {
            return Err(SupernetError::NonFiniteLoss);
        }
        let grads = tape.backward(loss)?;
        let mut updates = BTreeMap::new();
        for (&id, &leaf) in &leaves.leaves {
            if let Some(g) = grads.get(leaf) {
                updates.insert(id, g.clone());
            }
        }
        self.weights.sgd_step(&updates, lr, momentum, nesterov);
        Ok(loss_value)
    }

    /// Fraction of correctly classified rows. Pure: no parameter mutation.
    pub fn evaluate_accuracy(
        &self,
        view: &ConvChildView,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<f64, SupernetError> {
        let logits = self.forward_conv_child(view, images)?;
        let classes = logits.shape[1];
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &label)| {
                let row = &logits.data[i * classes..(i + 1) * classes];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                argmax == label
            })
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

/// Widths and unroll length of the recurrent network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnNetworkConfig {
    pub vocab: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub seq_len: usize,
    /// Drop probability on the cell output before the head (0 disables).
    pub dropout: f64,
}

/// The recurrent supernet: one cell unrolled over the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnSupernet {
    pub template: CellTemplate,
    pub config: RnnNetworkConfig,
    pub weights: SharedWeights,
}

impl RnnSupernet {
    pub fn build(
        num_hidden: usize,
        act_set: Vec<OperationKind>,
        config: RnnNetworkConfig,
        seed: u64,
    ) -> Result<RnnSupernet, SupernetError> {
        let template = CellTemplate::recurrent(num_hidden, act_set)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (e, h) = (config.embedding, config.hidden);
        let mut params = BTreeMap::new();
        params.insert(
            ParamId::Embedding,
            Tensor::uniform_init(&[config.vocab, e], e, &mut rng),
        );
        params.insert(
            ParamId::InputTransform { slot: 0 },
            Tensor::uniform_init(&[e, h], e, &mut rng),
        );
        params.insert(
            ParamId::InputTransform { slot: 1 },
            Tensor::uniform_init(&[h, h], h, &mut rng),
        );
        params.insert(ParamId::InputBias, Tensor::zeros(&[h]));
        for edge in template.all_edges() {
            for &op in &template.op_set {
                params.insert(
                    cell_op_id(CellKind::Recurrent, edge, op, ParamPart::Weight),
                    Tensor::uniform_init(&[h, h], h, &mut rng),
                );
                params.insert(
                    cell_op_id(CellKind::Recurrent, edge, op, ParamPart::Bias),
                    Tensor::zeros(&[h]),
                );
            }
        }
        params.insert(
            ParamId::HeadWeight,
            Tensor::uniform_init(&[h, config.vocab], h, &mut rng),
        );
        params.insert(ParamId::HeadBias, Tensor::zeros(&[config.vocab]));
        Ok(RnnSupernet {
            template,
            config,
            weights: SharedWeights {
                params,
                momentum: BTreeMap::new(),
            },
        })
    }

    fn check_sample(&self, sample: &ArchitectureSample) -> Result<(), SupernetError> {
        let report = self.template.validate(sample);
        if !report.is_valid() {
            return Err(SupernetError::InvalidSample(format!("{:?}", report.violations)));
        }
        Ok(())
    }

    /// One unrolled step: embedded input plus previous hidden through the
    /// fixed tanh node, then the sampled activations, then the mean.
    fn cell_step(
        &self,
        tape: &mut Tape,
        leaves: &mut LeafMap,
        sample: &ArchitectureSample,
        x: ValueId,
        h_prev: ValueId,
    ) -> Result<ValueId, SupernetError> {
        let wx = leaves.get(tape, ParamId::InputTransform { slot: 0 })?;
        let wh = leaves.get(tape, ParamId::InputTransform { slot: 1 })?;
        let bias = leaves.get(tape, ParamId::InputBias)?;
        let from_x = tape.dense(x, wx, bias)?;
        let from_h = tape.matmul(h_prev, wh)?;
        let pre = tape.add(from_x, from_h)?;
        let first = tape.activation(OperationKind::Tanh, pre)?;
        let first_node = self.template.first_hidden_node().expect("recurrent");
        let mut node_vals: BTreeMap<usize, ValueId> = BTreeMap::new();
        node_vals.insert(first_node, first);
        for assignment in &sample.assignments {
            // r = 1: a single (edge, activation) pair per node.
            let edge = assignment.edges[0];
            let op = assignment.ops[0];
            let w = leaves.get(tape, cell_op_id(CellKind::Recurrent, edge, op, ParamPart::Weight))?;
            let b = leaves.get(tape, cell_op_id(CellKind::Recurrent, edge, op, ParamPart::Bias))?;
            let src = *node_vals
                .get(&edge.src)
                .ok_or_else(|| SupernetError::InvalidSample(format!("edge {edge}")))?;
            let affine = tape.dense(src, w, b)?;
            node_vals.insert(assignment.node, tape.activation(op, affine)?);
        }
        let hidden: Vec<ValueId> = node_vals.values().copied().collect();
        Ok(tape.mean_n(&hidden)?)
    }

    /// Unroll over `inputs` (time-major token batches). Returns per-step
    /// logits, the final hidden state, and the parameter leaves.
    #[allow(clippy::type_complexity)]
    fn forward<'a>(
        &'a self,
        tape: &mut Tape,
        sample: &ArchitectureSample,
        inputs: &[Vec<usize>],
        h0: &Tensor,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<(Vec<ValueId>, ValueId, LeafMap<'a>), SupernetError> {
        self.check_sample(sample)?;
        let mut leaves = LeafMap::new(&self.weights);
        let table = leaves.get(tape, ParamId::Embedding)?;
        let head_w = leaves.get(tape, ParamId::HeadWeight)?;
        let head_b = leaves.get(tape, ParamId::HeadBias)?;
        let mut h = tape.leaf(h0.clone());
        let mut step_logits = Vec::with_capacity(inputs.len());
        let mut dropout_rng = dropout_rng;
        for tokens in inputs {
            let x = tape.embedding(table, tokens)?;
            h = self.cell_step(tape, &mut leaves, sample, x, h)?;
            let pre_head = match dropout_rng.as_deref_mut() {
                Some(rng) => tape.dropout(h, self.config.dropout, rng),
                None => h,
            };
            step_logits.push(tape.dense(pre_head, head_w, head_b)?);
        }
        Ok((step_logits, h, leaves))
    }

    /// Forward-only per-step logits and final hidden state.
    pub fn forward_recurrent_child(
        &self,
        sample: &ArchitectureSample,
        inputs: &[Vec<usize>],
        h0: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor), SupernetError> {
        let mut tape = Tape::new();
        let (logits, h, _) = self.forward(&mut tape, sample, inputs, h0, None)?;
        let out = logits.iter().map(|&l| tape.value(l).clone()).collect();
        Ok((out, tape.value(h).clone()))
    }

    /// Mean cross-entropy per token over the unrolled sequence.
    fn sequence_loss(
        tape: &mut Tape,
        step_logits: &[ValueId],
        targets: &[Vec<usize>],
    ) -> Result<ValueId, SupernetError> {
        let mut losses = Vec::with_capacity(step_logits.len());
        for (&logits, target) in step_logits.iter().zip(targets) {
            losses.push(tape.softmax_cross_entropy(logits, target)?);
        }
        Ok(tape.mean_n(&losses)?)
    }

    /// One plain-SGD training step (dropout active).
    pub fn child_sgd_step(
        &mut self,
        sample: &ArchitectureSample,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        h0: &Tensor,
        lr: f64,
        dropout_rng: &mut ChaCha20Rng,
    ) -> Result<f64, SupernetError> {
        let mut tape = Tape::new();
        let (step_logits, _, leaves) =
            self.forward(&mut tape, sample, inputs, h0, Some(dropout_rng))?;
        let loss = Self::sequence_loss(&mut tape, &step_logits, targets)?;
        let loss_value = tape.value(loss).data[0];
        if !loss_value.is_finite() {
            return Err(SupernetError::NonFiniteLoss);
        }
        let grads = tape.backward(loss)?;
        let mut updates = BTreeMap::new();
        for (&id, &leaf) in &leaves.leaves {
            if let Some(g) = grads.get(leaf) {
                updates.insert(id, g.clone());
            }
        }
        self.weights.sgd_step(&updates, lr, None, false);
        Ok(loss_value)
    }

    /// Mean per-token loss without dropout or mutation.
    pub fn evaluate_mean_loss(
        &self,
        sample: &ArchitectureSample,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        h0: &Tensor,
    ) -> Result<f64, SupernetError> {
        let mut tape = Tape::new();
        let (step_logits, _, _) = self.forward(&mut tape, sample, inputs, h0, None)?;
        let loss = Self::sequence_loss(&mut tape, &step_logits, targets)?;
        Ok(tape.value(loss).data[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::NodeAssignment;
    use rand::Rng;

    fn small_config() -> ConvNetworkConfig {
        ConvNetworkConfig {
            channels: 2,
            cells_per_stage: 1,
            num_reduction: 1,
            input_channels: 1,
            input_hw: 8,
            num_classes: 2,
        }
    }

    fn uniform_sample<R: Rng>(template: &CellTemplate, rng: &mut R) -> ArchitectureSample {
        // Uniform choice of structure and ops, independent of policies.
        let mut assignments = Vec::new();
        for node in template.searchable_nodes() {
            let combos = template.enumerate_edge_combinations(node).unwrap();
            let edges = combos[rng.gen_range(0..combos.len())].clone();
            let ops = edges
                .iter()
                .map(|_| template.op_set[rng.gen_range(0..template.op_set.len())])
                .collect();
            assignments.push(NodeAssignment { node, edges, ops });
        }
        ArchitectureSample {
            kind: template.kind,
            assignments,
        }
    }

    fn all_identity_sample(template: &CellTemplate) -> ArchitectureSample {
        let assignments = template
            .searchable_nodes()
            .into_iter()
            .map(|node| {
                let edges = template.enumerate_edge_combinations(node).unwrap()[0].clone();
                let ops = vec![OperationKind::Identity; edges.len()];
                NodeAssignment { node, edges, ops }
            })
            .collect();
        ArchitectureSample {
            kind: template.kind,
            assignments,
        }
    }

    #[test]
    fn triple_count_matches_edge_formula() {
        let net = ConvSupernet::build(6, OperationKind::conv_set(), small_config(), 1).unwrap();
        // N=6: 2+3+4+5 = 14 candidate edges per kind, 7 ops, 2 kinds.
        assert_eq!(net.weights.cell_op_triples(), 14 * 7 * 2);
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 9).unwrap();
        let b = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 9).unwrap();
        assert_eq!(a.weights, b.weights);
        let c = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 10).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn normal_cell_preserves_spatial_and_concats_channels() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let net = ConvSupernet::build(6, OperationKind::conv_set(), small_config(), 3).unwrap();
        let c = net.config.channels;
        for _ in 0..20 {
            let sample = uniform_sample(&net.normal, &mut rng);
            let x0 = Tensor::uniform_init(&[1, c, 7, 7], 1, &mut rng);
            let x1 = Tensor::uniform_init(&[1, c, 7, 7], 1, &mut rng);
            let out = net.run_cell(&sample, &x0, &x1).unwrap();
            // 4 hidden nodes concatenated: C -> 4C, spatial preserved.
            assert_eq!(out.shape, vec![1, 4 * c, 7, 7]);
        }
    }

    #[test]
    fn reduction_cell_halves_spatial() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let net = ConvSupernet::build(5, OperationKind::conv_set(), small_config(), 4).unwrap();
        let c = net.config.channels;
        for hw in [6, 7] {
            for _ in 0..10 {
                let sample = uniform_sample(&net.reduction, &mut rng);
                let x0 = Tensor::uniform_init(&[1, c, hw, hw], 1, &mut rng);
                let x1 = Tensor::uniform_init(&[1, c, hw, hw], 1, &mut rng);
                let out = net.run_cell(&sample, &x0, &x1).unwrap();
                let half = hw.div_ceil(2);
                assert_eq!(out.shape, vec![1, 3 * c, half, half]);
            }
        }
    }

    #[test]
    fn full_forward_shapes_with_reductions() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut config = small_config();
        config.num_reduction = 2;
        config.input_hw = 9;
        let net = ConvSupernet::build(4, OperationKind::conv_set(), config, 5).unwrap();
        let view = ConvChildView {
            normal: uniform_sample(&net.normal, &mut rng),
            reduction: uniform_sample(&net.reduction, &mut rng),
        };
        let images = Tensor::uniform_init(&[3, 1, 9, 9], 1, &mut rng);
        let logits = net.forward_conv_child(&view, &images).unwrap();
        assert_eq!(logits.shape, vec![3, 2]);
    }

    #[test]
    fn all_identity_child_ignores_unused_conv_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut net = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 6).unwrap();
        let view = ConvChildView {
            normal: all_identity_sample(&net.normal),
            reduction: all_identity_sample(&net.reduction),
        };
        let images = Tensor::uniform_init(&[2, 1, 8, 8], 1, &mut rng);
        let before = net.forward_conv_child(&view, &images).unwrap();
        // Trashing every non-identity cell-op parameter must not matter.
        for (id, tensor) in net.weights.params.iter_mut() {
            if let ParamId::CellOp { op, .. } = id {
                if *op != OperationKind::Identity {
                    for v in &mut tensor.data {
                        *v = 1e6;
                    }
                }
            }
        }
        let after = net.forward_conv_child(&view, &images).unwrap();
        assert_eq!(before, after);
        // But the identity scale is on the used path.
        for (id, tensor) in net.weights.params.iter_mut() {
            if let ParamId::CellOp {
                op: OperationKind::Identity,
                part: ParamPart::Scale,
                ..
            } = id
            {
                for v in &mut tensor.data {
                    *v = 2.0;
                }
            }
        }
        let scaled = net.forward_conv_child(&view, &images).unwrap();
        assert_ne!(before, scaled);
    }

    #[test]
    fn sgd_step_updates_only_touched_entries() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut net = ConvSupernet::build(5, OperationKind::conv_set(), small_config(), 7).unwrap();
        let images = Tensor::uniform_init(&[2, 1, 8, 8], 1, &mut rng);
        for _ in 0..8 {
            let view = ConvChildView {
                normal: uniform_sample(&net.normal, &mut rng),
                reduction: uniform_sample(&net.reduction, &mut rng),
            };
            let before = net.weights.params.clone();
            net.child_sgd_step(&view, &images, &[0, 1], 0.01, Some(0.9), true).unwrap();
            let touched: std::collections::BTreeSet<(CellKind, EdgeId, OperationKind)> = view
                .normal
                .edge_ops()
                .map(|(e, o)| (CellKind::ConvNormal, e, o))
                .chain(
                    view.reduction
                        .edge_ops()
                        .map(|(e, o)| (CellKind::ConvReduction, e, o)),
                )
                .collect();
            for (id, tensor) in &net.weights.params {
                if let ParamId::CellOp { cell, edge, op, .. } = id {
                    if !touched.contains(&(*cell, *edge, *op)) {
                        assert_eq!(tensor, &before[id], "untouched {id:?} changed");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_lr_step_keeps_parameters() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut net = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 8).unwrap();
        let view = ConvChildView {
            normal: uniform_sample(&net.normal, &mut rng),
            reduction: uniform_sample(&net.reduction, &mut rng),
        };
        let images = Tensor::uniform_init(&[2, 1, 8, 8], 1, &mut rng);
        let before = net.weights.params.clone();
        let loss = net.child_sgd_step(&view, &images, &[0, 1], 0.0, Some(0.9), true).unwrap();
        assert!(loss.is_finite());
        assert_eq!(net.weights.params, before);
    }

    #[test]
    fn fixed_sample_training_separates_classes() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let set = crate::datasets::textured_images(16, 2, 8, 0.05, &mut rng);
        let mut net = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 9).unwrap();
        let view = ConvChildView {
            normal: uniform_sample(&net.normal, &mut rng),
            reduction: uniform_sample(&net.reduction, &mut rng),
        };
        let mut order: Vec<usize> = (0..set.len()).collect();
        for step in 0..200 {
            // Cycle minibatches of 8 in a shuffled but deterministic order.
            if step % 4 == 0 {
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
            }
            let picks = &order[(step % 4) * 8..(step % 4) * 8 + 8];
            let mut images = Tensor::zeros(&[8, 1, 8, 8]);
            let mut labels = Vec::new();
            for (row, &i) in picks.iter().enumerate() {
                images.data[row * 64..(row + 1) * 64]
                    .copy_from_slice(&set.features.data[i * 64..(i + 1) * 64]);
                labels.push(set.labels[i]);
            }
            net.child_sgd_step(&view, &images, &labels, 0.05, Some(0.9), true).unwrap();
        }
        let acc = net
            .evaluate_accuracy(&view, &set.features, &set.labels)
            .unwrap();
        assert!(acc > 0.95, "training accuracy {acc}");
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let net = ConvSupernet::build(4, OperationKind::conv_set(), small_config(), 10).unwrap();
        let view = ConvChildView {
            normal: uniform_sample(&net.normal, &mut rng),
            reduction: uniform_sample(&net.reduction, &mut rng),
        };
        let images = Tensor::uniform_init(&[4, 1, 8, 8], 1, &mut rng);
        let before = net.weights.clone();
        let a = net.evaluate_accuracy(&view, &images, &[0, 1, 0, 1]).unwrap();
        let b = net.evaluate_accuracy(&view, &images, &[0, 1, 0, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.weights, before);
    }

    #[test]
    fn training_loss_decreases_over_fixed_seeds() {
        for seed in 0..5u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            // Mean-offset images: learnable by every sampled child, so the
            // per-step architecture churn does not mask the trend.
            let mut set = crate::datasets::textured_images(8, 2, 8, 0.3, &mut rng);
            for (i, &label) in set.labels.clone().iter().enumerate() {
                for v in &mut set.features.data[i * 64..(i + 1) * 64] {
                    *v = 0.2 * *v + if label == 0 { -0.5 } else { 0.5 };
                }
            }
            let mut net =
                ConvSupernet::build(4, OperationKind::conv_set(), small_config(), seed).unwrap();
            let mut losses = Vec::new();
            for step in 0..150 {
                let view = ConvChildView {
                    normal: uniform_sample(&net.normal, &mut rng),
                    reduction: uniform_sample(&net.reduction, &mut rng),
                };
                let start = (step * 4) % set.len();
                let batch = set.slice(start, 4);
                losses.push(
                    net.child_sgd_step(&view, &batch.features, &batch.labels, 0.02, Some(0.9), true)
                        .unwrap(),
                );
            }
            let tenth = losses.len() / 10;
            let median = |xs: &[f64]| {
                let mut v = xs.to_vec();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v[v.len() / 2]
            };
            assert!(
                median(&losses[losses.len() - tenth..]) < median(&losses[..tenth]),
                "seed {seed}: losses {losses:?}"
            );
        }
    }

    fn rnn_config() -> RnnNetworkConfig {
        RnnNetworkConfig {
            vocab: 4,
            embedding: 4,
            hidden: 4,
            seq_len: 5,
            dropout: 0.0,
        }
    }

    #[test]
    fn rnn_zero_weights_identity_acts_stay_at_zero() {
        let mut net = RnnSupernet::build(
            3,
            OperationKind::recurrent_set(),
            rnn_config(),
            1,
        )
        .unwrap();
        for tensor in net.weights.params.values_mut() {
            for v in &mut tensor.data {
                *v = 0.0;
            }
        }
        let sample = all_identity_sample(&net.template);
        let h0 = Tensor::zeros(&[2, 4]);
        let (_, h) = net
            .forward_recurrent_child(&sample, &[vec![0, 1], vec![2, 3]], &h0)
            .unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_mean_of_equal_nodes_is_that_node() {
        // A 2-hidden-node cell where the searched node is identity over the
        // fixed node with zero affine: with weight = I, both nodes are equal
        // and the mean equals the fixed node value.
        let mut net =
            RnnSupernet::build(2, OperationKind::recurrent_set(), rnn_config(), 2).unwrap();
        let h = net.config.hidden;
        for (id, tensor) in net.weights.params.iter_mut() {
            if let ParamId::CellOp { part, .. } = id {
                match part {
                    ParamPart::Weight => {
                        for (i, v) in tensor.data.iter_mut().enumerate() {
                            *v = if i / h == i % h { 1.0 } else { 0.0 };
                        }
                    }
                    _ => tensor.data.iter_mut().for_each(|v| *v = 0.0),
                }
            }
        }
        let sample = all_identity_sample(&net.template);
        let h0 = Tensor::zeros(&[1, h]);
        let (_, h_out) = net
            .forward_recurrent_child(&sample, &[vec![1]], &h0)
            .unwrap();
        // Compare to a 1-step manual fixed node.
        let wx = net.weights.get(ParamId::InputTransform { slot: 0 }).unwrap();
        let emb = net.weights.get(ParamId::Embedding).unwrap();
        let mut manual = vec![0.0; h];
        for (j, m) in manual.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..net.config.embedding {
                acc += emb.data[net.config.embedding + i] * wx.data[i * h + j];
            }
            *m = acc.tanh();
        }
        for (a, b) in h_out.data.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rnn_unrolled_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let net = RnnSupernet::build(3, OperationKind::recurrent_set(), rnn_config(), 3).unwrap();
        let sample = uniform_sample(&net.template, &mut rng);
        let inputs = vec![vec![0, 1], vec![1, 2], vec![3, 0], vec![2, 2], vec![1, 3]];
        let targets = vec![vec![1, 2], vec![3, 0], vec![2, 2], vec![1, 3], vec![0, 1]];
        let h0 = Tensor::zeros(&[2, 4]);
        // Analytic gradient of the 5-step loss w.r.t. one edge weight.
        let (edge, op) = sample.edge_ops().next().unwrap();
        let target_id = cell_op_id(CellKind::Recurrent, edge, op, ParamPart::Weight);
        let mut tape = Tape::new();
        let (step_logits, _, leaves) = net
            .forward(&mut tape, &sample, &inputs, &h0, None)
            .unwrap();
        let loss = RnnSupernet::sequence_loss(&mut tape, &step_logits, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaves.leaves[&target_id]).unwrap().clone();
        let eval = |net: &RnnSupernet| {
            net.evaluate_mean_loss(&sample, &inputs, &targets, &h0)
                .unwrap()
        };
        let h = 1e-5;
        for i in 0..analytic.len() {
            let mut plus = net.clone();
            plus.weights.params.get_mut(&target_id).unwrap().data[i] += h;
            let mut minus = net.clone();
            minus.weights.params.get_mut(&target_id).unwrap().data[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = numeric.abs().max(analytic.data[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic.data[i]).abs() / denom < 1e-4,
                "entry {i}: numeric {numeric} vs analytic {}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn rnn_sgd_step_moves_loss_down() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut net =
            RnnSupernet::build(3, OperationKind::recurrent_set(), rnn_config(), 5).unwrap();
        let sample = uniform_sample(&net.template, &mut rng);
        let inputs = vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 0]];
        let targets = vec![vec![1, 1], vec![2, 2], vec![3, 3], vec![0, 0]];
        let h0 = Tensor::zeros(&[2, 4]);
        let before = net.evaluate_mean_loss(&sample, &inputs, &targets, &h0).unwrap();
        let mut dropout_rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..50 {
            net.child_sgd_step(&sample, &inputs, &targets, &h0, 0.5, &mut dropout_rng)
                .unwrap();
        }
        let after = net.evaluate_mean_loss(&sample, &inputs, &targets, &h0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }
}
