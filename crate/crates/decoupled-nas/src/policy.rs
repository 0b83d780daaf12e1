//! Policy vectors and their training machinery.
//!
//! Every searchable node owns a logit vector over its incoming-edge
//! combinations; every candidate edge owns a logit vector over the operation
//! set. Sampling is decoupled: the structure (one combination per node) is
//! drawn first, then one operation per *selected* edge. Unselected edges
//! contribute nothing to probabilities or gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{
    ArchitectureSample, CellKind, CellTemplate, EdgeId, NodeAssignment, SearchSpaceError,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("logits must be non-empty and finite")]
    BadLogits,
    #[error("no policies for cell kind {0}")]
    UnknownKind(CellKind),
    #[error("no policy vector for node {0}")]
    UnknownNode(usize),
    #[error("no policy vector for edge {0}")]
    UnknownEdge(EdgeId),
    #[error("combination index {index} out of range for node {node}")]
    BadCombination { node: usize, index: usize },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("advantage must be finite")]
    BadAdvantage,
    #[error("gradient shape does not match policy set")]
    ShapeMismatch,
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, PolicyError> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::BadLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// Log-softmax, shares the stabilization with [`softmax`].
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, PolicyError> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::BadLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = max + sum.ln();
    Ok(logits.iter().map(|&v| v - log_sum).collect())
}

/// Per-factor real values congruent with a [`PolicySet`]: logits, gradients,
/// and Adam moments all share this layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyTable {
    #[serde(with = "crate::serde_pairs")]
    pub node: BTreeMap<(CellKind, usize), Vec<f64>>,
    #[serde(with = "crate::serde_pairs")]
    pub edge: BTreeMap<(CellKind, EdgeId), Vec<f64>>,
}

impl PolicyTable {
    pub fn zeros_like(other: &PolicyTable) -> PolicyTable {
        PolicyTable {
            node: other
                .node
                .iter()
                .map(|(k, v)| (*k, vec![0.0; v.len()]))
                .collect(),
            edge: other
                .edge
                .iter()
                .map(|(k, v)| (*k, vec![0.0; v.len()]))
                .collect(),
        }
    }

    pub fn congruent_with(&self, other: &PolicyTable) -> bool {
        self.node.len() == other.node.len()
            && self.edge.len() == other.edge.len()
            && self
                .node
                .iter()
                .zip(other.node.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.len() == vb.len())
            && self
                .edge
                .iter()
                .zip(other.edge.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.len() == vb.len())
    }

    /// Accumulate `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &PolicyTable) -> Result<(), PolicyError> {
        for (key, vals) in &other.node {
            let dst = self.node.get_mut(key).ok_or(PolicyError::ShapeMismatch)?;
            if dst.len() != vals.len() {
                return Err(PolicyError::ShapeMismatch);
            }
            for (d, v) in dst.iter_mut().zip(vals) {
                *d += v;
            }
        }
        for (key, vals) in &other.edge {
            let dst = self.edge.get_mut(key).ok_or(PolicyError::ShapeMismatch)?;
            if dst.len() != vals.len() {
                return Err(PolicyError::ShapeMismatch);
            }
            for (d, v) in dst.iter_mut().zip(vals) {
                *d += v;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for vals in self.node.values_mut().chain(self.edge.values_mut()) {
            for v in vals {
                *v *= factor;
            }
        }
    }
}

/// Adam optimizer state, shape-congruent with the policy logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: PolicyTable,
    pub second_moment: PolicyTable,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(policies: &PolicySet) -> AdamState {
        AdamState {
            first_moment: PolicyTable::zeros_like(&policies.logits),
            second_moment: PolicyTable::zeros_like(&policies.logits),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// All node and edge policy vectors for the searched cell kinds, plus the
/// templates that define their index spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    #[serde(with = "crate::serde_pairs")]
    pub templates: BTreeMap<CellKind, CellTemplate>,
    pub logits: PolicyTable,
    /// Softmax temperature applied to every sampling distribution.
    pub temperature: f64,
}

impl PolicySet {
    /// Fresh policies with all logits zero, i.e. uniform sampling.
    pub fn init(templates: &[CellTemplate]) -> PolicySet {
        let mut logits = PolicyTable::default();
        let mut map = BTreeMap::new();
        for t in templates {
            for node in t.searchable_nodes() {
                let c = t.enumerate_edge_combinations(node).expect("searchable").len();
                logits.node.insert((t.kind, node), vec![0.0; c]);
            }
            for edge in t.all_edges() {
                logits.edge.insert((t.kind, edge), vec![0.0; t.op_set.len()]);
            }
            map.insert(t.kind, t.clone());
        }
        PolicySet {
            templates: map,
            logits,
            temperature: 1.0,
        }
    }

    pub fn template(&self, kind: CellKind) -> Result<&CellTemplate, PolicyError> {
        self.templates.get(&kind).ok_or(PolicyError::UnknownKind(kind))
    }

    fn tempered(&self, logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|&v| v / self.temperature).collect()
    }

    /// Sampling distribution of one factor.
    pub fn distribution(&self, logits: &[f64]) -> Result<Vec<f64>, PolicyError> {
        softmax(&self.tempered(logits))
    }

    /// Structure step: one combination index per searchable node.
    pub fn sample_structure<R: Rng>(
        &self,
        kind: CellKind,
        rng: &mut R,
    ) -> Result<BTreeMap<usize, usize>, PolicyError> {
        let template = self.template(kind)?;
        let mut choices = BTreeMap::new();
        for node in template.searchable_nodes() {
            let logits = self
                .logits
                .node
                .get(&(kind, node))
                .ok_or(PolicyError::UnknownNode(node))?;
            let probs = self.distribution(logits)?;
            choices.insert(node, sample_index(&probs, rng));
        }
        Ok(choices)
    }

    /// Operation step: one operation for each *selected* edge.
    pub fn sample_operations<R: Rng>(
        &self,
        kind: CellKind,
        structure: &BTreeMap<usize, usize>,
        rng: &mut R,
    ) -> Result<Vec<NodeAssignment>, PolicyError> {
        let template = self.template(kind)?;
        let mut assignments = Vec::new();
        for node in template.searchable_nodes() {
            let &index = structure
                .get(&node)
                .ok_or(PolicyError::UnknownNode(node))?;
            let combos = template.enumerate_edge_combinations(node)?;
            let edges = combos
                .get(index)
                .ok_or(PolicyError::BadCombination { node, index })?
                .clone();
            let mut ops = Vec::with_capacity(edges.len());
            for &edge in &edges {
                let logits = self
                    .logits
                    .edge
                    .get(&(kind, edge))
                    .ok_or(PolicyError::UnknownEdge(edge))?;
                let probs = self.distribution(logits)?;
                ops.push(template.op_set[sample_index(&probs, rng)]);
            }
            assignments.push(NodeAssignment { node, edges, ops });
        }
        Ok(assignments)
    }

    /// Structure step followed by the operation step.
    pub fn sample_architecture<R: Rng>(
        &self,
        kind: CellKind,
        rng: &mut R,
    ) -> Result<ArchitectureSample, PolicyError> {
        let structure = self.sample_structure(kind, rng)?;
        let assignments = self.sample_operations(kind, &structure, rng)?;
        Ok(ArchitectureSample { kind, assignments })
    }

    /// Log-probability of a sample under the current policies.
    pub fn log_prob(&self, sample: &ArchitectureSample) -> Result<f64, PolicyError> {
        let template = self.template(sample.kind)?;
        let report = template.validate(sample);
        if !report.is_valid() {
            return Err(PolicyError::InvalidSample(format!(
                "{:?}",
                report.violations
            )));
        }
        let mut total = 0.0;
        for a in &sample.assignments {
            let index = template.combination_index(a.node, &a.edges)?;
            let logits = self
                .logits
                .node
                .get(&(sample.kind, a.node))
                .ok_or(PolicyError::UnknownNode(a.node))?;
            total += log_softmax(&self.tempered(logits))?[index];
            for (&edge, &op) in a.edges.iter().zip(a.ops.iter()) {
                let logits = self
                    .logits
                    .edge
                    .get(&(sample.kind, edge))
                    .ok_or(PolicyError::UnknownEdge(edge))?;
                let op_index = template
                    .op_set
                    .iter()
                    .position(|&o| o == op)
                    .expect("validated op");
                total += log_softmax(&self.tempered(logits))?[op_index];
            }
        }
        Ok(total)
    }

    /// REINFORCE ascent direction: gradient of `log P(m) * advantage` with
    /// respect to every logit. Edge policies of unselected edges get exactly
    /// zero.
    pub fn reinforce_grad(
        &self,
        sample: &ArchitectureSample,
        advantage: f64,
    ) -> Result<PolicyTable, PolicyError> {
        if !advantage.is_finite() {
            return Err(PolicyError::BadAdvantage);
        }
        let template = self.template(sample.kind)?;
        let report = template.validate(sample);
        if !report.is_valid() {
            return Err(PolicyError::InvalidSample(format!(
                "{:?}",
                report.violations
            )));
        }
        let mut grad = PolicyTable::zeros_like(&self.logits);
        let inv_temp = 1.0 / self.temperature;
        for a in &sample.assignments {
            let index = template.combination_index(a.node, &a.edges)?;
            let logits = &self.logits.node[&(sample.kind, a.node)];
            let probs = self.distribution(logits)?;
            let g = grad.node.get_mut(&(sample.kind, a.node)).expect("congruent");
            for (j, p) in probs.iter().enumerate() {
                let indicator = if j == index { 1.0 } else { 0.0 };
                g[j] += (indicator - p) * advantage * inv_temp;
            }
            for (&edge, &op) in a.edges.iter().zip(a.ops.iter()) {
                let logits = &self.logits.edge[&(sample.kind, edge)];
                let probs = self.distribution(logits)?;
                let op_index = template
                    .op_set
                    .iter()
                    .position(|&o| o == op)
                    .expect("validated op");
                let g = grad.edge.get_mut(&(sample.kind, edge)).expect("congruent");
                for (j, p) in probs.iter().enumerate() {
                    let indicator = if j == op_index { 1.0 } else { 0.0 };
                    g[j] += (indicator - p) * advantage * inv_temp;
                }
            }
        }
        Ok(grad)
    }

    /// One Adam update in the ascent direction of `grad`.
    pub fn adam_step(
        &mut self,
        grad: &PolicyTable,
        state: &mut AdamState,
        lr: f64,
    ) -> Result<(), PolicyError> {
        if !grad.congruent_with(&self.logits) {
            return Err(PolicyError::ShapeMismatch);
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - state.beta1.powi(t);
        let bc2 = 1.0 - state.beta2.powi(t);
        let update = |logits: &mut Vec<f64>, g: &[f64], m: &mut Vec<f64>, v: &mut Vec<f64>| {
            for i in 0..logits.len() {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                logits[i] += lr * m_hat / (v_hat.sqrt() + state.epsilon);
            }
        };
        for (key, logits) in self.logits.node.iter_mut() {
            update(
                logits,
                &grad.node[key],
                state.first_moment.node.get_mut(key).unwrap(),
                state.second_moment.node.get_mut(key).unwrap(),
            );
        }
        for (key, logits) in self.logits.edge.iter_mut() {
            update(
                logits,
                &grad.edge[key],
                state.first_moment.edge.get_mut(key).unwrap(),
                state.second_moment.edge.get_mut(key).unwrap(),
            );
        }
        Ok(())
    }
}

/// Inverse-CDF draw from a categorical distribution. Hand-rolled so the
/// consumed random stream is stable across dependency upgrades.
fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    probs.len() - 1
}
