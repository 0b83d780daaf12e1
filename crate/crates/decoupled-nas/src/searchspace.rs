//! Cell search-space definitions.
//!
//! A cell is a small DAG. Nodes are numbered globally and topologically:
//! nodes `0` and `1` are the cell inputs. For convolutional cells every node
//! `i >= 2` is searchable and may draw its `r = 2` incoming edges from any
//! pair of distinct earlier nodes, so it has `e_i = i` candidate edges. For
//! recurrent cells node `2` is the fixed first hidden node (it combines the
//! two inputs and applies tanh); the remaining hidden nodes are searchable
//! with `r = 1` and may connect to any earlier *hidden* node, giving the
//! `j`-th free hidden node `e = j` candidate edges.
//!
//! Edge combinations for a node are enumerated in lexicographic order of
//! their source tuples; that order defines the index space of the node's
//! policy vector and is stable across runs.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operations a sampled edge can carry.
///
/// The first seven form the convolutional operation set; the last four
/// (sharing `identity`) form the recurrent activation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    SepConv3x3,
    SepConv5x5,
    DilSepConv3x3,
    DilSepConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl OperationKind {
    /// The seven-operation convolutional set.
    pub fn conv_set() -> Vec<OperationKind> {
        vec![
            OperationKind::SepConv3x3,
            OperationKind::SepConv5x5,
            OperationKind::DilSepConv3x3,
            OperationKind::DilSepConv5x5,
            OperationKind::MaxPool3x3,
            OperationKind::AvgPool3x3,
            OperationKind::Identity,
        ]
    }

    /// The four-activation recurrent set.
    pub fn recurrent_set() -> Vec<OperationKind> {
        vec![
            OperationKind::Sigmoid,
            OperationKind::Tanh,
            OperationKind::Relu,
            OperationKind::Identity,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperationKind::SepConv3x3 => "sep_conv_3x3",
            OperationKind::SepConv5x5 => "sep_conv_5x5",
            OperationKind::DilSepConv3x3 => "dil_sep_conv_3x3",
            OperationKind::DilSepConv5x5 => "dil_sep_conv_5x5",
            OperationKind::MaxPool3x3 => "max_pool_3x3",
            OperationKind::AvgPool3x3 => "avg_pool_3x3",
            OperationKind::Identity => "identity",
            OperationKind::Sigmoid => "sigmoid",
            OperationKind::Tanh => "tanh",
            OperationKind::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<OperationKind, SearchSpaceError> {
        let all = [
            OperationKind::SepConv3x3,
            OperationKind::SepConv5x5,
            OperationKind::DilSepConv3x3,
            OperationKind::DilSepConv5x5,
            OperationKind::MaxPool3x3,
            OperationKind::AvgPool3x3,
            OperationKind::Identity,
            OperationKind::Sigmoid,
            OperationKind::Tanh,
            OperationKind::Relu,
        ];
        all.into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| SearchSpaceError::UnknownOperation(s.to_string()))
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which cell a template or sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    ConvNormal,
    ConvReduction,
    Recurrent,
}

impl CellKind {
    pub fn name(&self) -> &'static str {
        match self {
            CellKind::ConvNormal => "conv_normal",
            CellKind::ConvReduction => "conv_reduction",
            CellKind::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the hidden-node outputs are merged into the cell output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputAggregation {
    ChannelConcat,
    Mean,
}

/// A directed edge between two cell nodes, `src < dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub src: usize,
    pub dst: usize,
}

impl EdgeId {
    pub fn new(src: usize, dst: usize) -> EdgeId {
        debug_assert!(src < dst, "edge must point forward");
        EdgeId { src, dst }
    }

    /// The `"src,dst"` label used in exports.
    pub fn label(&self) -> String {
        format!("{},{}", self.src, self.dst)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SearchSpaceError {
    #[error("convolutional templates need at least 3 nodes, got {0}")]
    TooFewConvNodes(usize),
    #[error("recurrent templates need at least 2 hidden nodes, got {0}")]
    TooFewHiddenNodes(usize),
    #[error("operation set must not be empty")]
    EmptyOpSet,
    #[error("node {0} is not a searchable node of this template")]
    NotSearchable(usize),
    #[error("unknown operation name: {0}")]
    UnknownOperation(String),
    #[error("template kind {0} does not match")]
    KindMismatch(CellKind),
    #[error("space has {count} members, over the enumeration limit {limit}")]
    EnumerationTooLarge { count: BigUint, limit: u64 },
    #[error("malformed sample encoding: {0}")]
    BadEncoding(String),
    #[error("template parse error: {0}")]
    BadTemplate(String),
}

/// One way a sample can fail validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MissingNode { node: usize },
    UnexpectedNode { node: usize },
    WrongEdgeCount { node: usize, expected: usize, got: usize },
    DuplicateEdge { node: usize, edge: EdgeId },
    UnknownEdge { node: usize, edge: EdgeId },
    WrongDestination { node: usize, edge: EdgeId },
    OpOutsideSet { edge: EdgeId, op: OperationKind },
    OpCountMismatch { node: usize, expected: usize, got: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingNode { node } => write!(f, "node {node} has no assignment"),
            Violation::UnexpectedNode { node } => write!(f, "node {node} is not searchable"),
            Violation::WrongEdgeCount { node, expected, got } => {
                write!(f, "node {node} has {got} edges, expected {expected}")
            }
            Violation::DuplicateEdge { node, edge } => {
                write!(f, "node {node} repeats edge {edge}")
            }
            Violation::UnknownEdge { node, edge } => {
                write!(f, "node {node} uses unknown edge {edge}")
            }
            Violation::WrongDestination { node, edge } => {
                write!(f, "edge {edge} does not end at its owning node {node}")
            }
            Violation::OpOutsideSet { edge, op } => {
                write!(f, "edge {edge} carries {op}, outside the template op set")
            }
            Violation::OpCountMismatch { node, expected, got } => {
                write!(f, "node {node} has {got} ops for {expected} edges")
            }
        }
    }
}

/// Validation verdict with the full violation list.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// The chosen edges and per-edge operations of one searchable node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub node: usize,
    /// `fan_in` distinct edges, sorted by source.
    pub edges: Vec<EdgeId>,
    /// One operation per edge, aligned with `edges`.
    pub ops: Vec<OperationKind>,
}

/// One concrete cell architecture.
///
/// For recurrent templates the fixed first hidden node (inputs summed through
/// learned affine maps, then tanh) is part of the template and does not
/// appear here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSample {
    pub kind: CellKind,
    pub assignments: Vec<NodeAssignment>,
}

impl ArchitectureSample {
    /// All `(edge, op)` pairs in node order.
    pub fn edge_ops(&self) -> impl Iterator<Item = (EdgeId, OperationKind)> + '_ {
        self.assignments
            .iter()
            .flat_map(|a| a.edges.iter().copied().zip(a.ops.iter().copied()))
    }

    /// Compact single-line encoding, stable across runs.
    ///
    /// Format: `kind;node:src+src=op+op;...` with edges sorted by source.
    pub fn encode(&self) -> String {
        let mut parts = vec![self.kind.name().to_string()];
        for a in &self.assignments {
            let srcs: Vec<String> = a.edges.iter().map(|e| e.src.to_string()).collect();
            let ops: Vec<String> = a.ops.iter().map(|o| o.name().to_string()).collect();
            parts.push(format!("{}:{}={}", a.node, srcs.join("+"), ops.join("+")));
        }
        parts.join(";")
    }

    pub fn decode(s: &str) -> Result<ArchitectureSample, SearchSpaceError> {
        let mut fields = s.split(';');
        let kind_str = fields
            .next()
            .ok_or_else(|| SearchSpaceError::BadEncoding("empty".into()))?;
        let kind = match kind_str {
            "conv_normal" => CellKind::ConvNormal,
            "conv_reduction" => CellKind::ConvReduction,
            "recurrent" => CellKind::Recurrent,
            other => return Err(SearchSpaceError::BadEncoding(format!("bad kind {other}"))),
        };
        let mut assignments = Vec::new();
        for field in fields {
            let (node_str, rest) = field
                .split_once(':')
                .ok_or_else(|| SearchSpaceError::BadEncoding(field.to_string()))?;
            let (srcs_str, ops_str) = rest
                .split_once('=')
                .ok_or_else(|| SearchSpaceError::BadEncoding(field.to_string()))?;
            let node: usize = node_str
                .parse()
                .map_err(|_| SearchSpaceError::BadEncoding(field.to_string()))?;
            let mut edges = Vec::new();
            for s in srcs_str.split('+') {
                let src: usize = s
                    .parse()
                    .map_err(|_| SearchSpaceError::BadEncoding(field.to_string()))?;
                edges.push(EdgeId { src, dst: node });
            }
            let mut ops = Vec::new();
            for o in ops_str.split('+') {
                ops.push(OperationKind::parse(o)?);
            }
            assignments.push(NodeAssignment { node, edges, ops });
        }
        Ok(ArchitectureSample { kind, assignments })
    }
}

/// Declarative description of a cell search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTemplate {
    pub kind: CellKind,
    /// Total node count for conv cells; hidden node count for recurrent.
    pub num_nodes: usize,
    pub num_inputs: usize,
    /// Edges selected per searchable node (`r`).
    pub fan_in: usize,
    pub op_set: Vec<OperationKind>,
    pub output_aggregation: OutputAggregation,
}

impl CellTemplate {
    /// A convolutional cell template: `num_nodes` total nodes, 2 of them
    /// inputs, `r = 2`, channel-concat output.
    pub fn conv(
        kind: CellKind,
        num_nodes: usize,
        op_set: Vec<OperationKind>,
    ) -> Result<CellTemplate, SearchSpaceError> {
        if kind == CellKind::Recurrent {
            return Err(SearchSpaceError::KindMismatch(kind));
        }
        if num_nodes < 3 {
            return Err(SearchSpaceError::TooFewConvNodes(num_nodes));
        }
        if op_set.is_empty() {
            return Err(SearchSpaceError::EmptyOpSet);
        }
        Ok(CellTemplate {
            kind,
            num_nodes,
            num_inputs: 2,
            fan_in: 2,
            op_set,
            output_aggregation: OutputAggregation::ChannelConcat,
        })
    }

    /// A recurrent cell template: `num_hidden` hidden nodes, the first of
    /// them fixed, `r = 1`, mean output.
    pub fn recurrent(
        num_hidden: usize,
        act_set: Vec<OperationKind>,
    ) -> Result<CellTemplate, SearchSpaceError> {
        if num_hidden < 2 {
            return Err(SearchSpaceError::TooFewHiddenNodes(num_hidden));
        }
        if act_set.is_empty() {
            return Err(SearchSpaceError::EmptyOpSet);
        }
        Ok(CellTemplate {
            kind: CellKind::Recurrent,
            num_nodes: num_hidden,
            num_inputs: 2,
            fan_in: 1,
            op_set: act_set,
            output_aggregation: OutputAggregation::Mean,
        })
    }

    /// Global node count including inputs (and the fixed hidden node for
    /// recurrent cells).
    pub fn total_nodes(&self) -> usize {
        match self.kind {
            CellKind::ConvNormal | CellKind::ConvReduction => self.num_nodes,
            CellKind::Recurrent => self.num_inputs + self.num_nodes,
        }
    }

    /// For recurrent templates, the global index of the fixed first hidden
    /// node.
    pub fn first_hidden_node(&self) -> Option<usize> {
        match self.kind {
            CellKind::Recurrent => Some(self.num_inputs),
            _ => None,
        }
    }

    /// Nodes that carry a policy vector, in topological order.
    pub fn searchable_nodes(&self) -> Vec<usize> {
        match self.kind {
            CellKind::ConvNormal | CellKind::ConvReduction => {
                (self.num_inputs..self.num_nodes).collect()
            }
            // Hidden nodes after the fixed first one.
            CellKind::Recurrent => (self.num_inputs + 1..self.total_nodes()).collect(),
        }
    }

    /// Candidate incoming edges of a searchable node, ordered by source.
    pub fn candidate_edges(&self, node: usize) -> Result<Vec<EdgeId>, SearchSpaceError> {
        if !self.searchable_nodes().contains(&node) {
            return Err(SearchSpaceError::NotSearchable(node));
        }
        let first_src = match self.kind {
            CellKind::ConvNormal | CellKind::ConvReduction => 0,
            // Recurrent nodes connect to earlier hidden nodes only.
            CellKind::Recurrent => self.num_inputs,
        };
        Ok((first_src..node).map(|src| EdgeId::new(src, node)).collect())
    }

    /// All candidate edges of the whole template, grouped by node.
    pub fn all_edges(&self) -> Vec<EdgeId> {
        self.searchable_nodes()
            .into_iter()
            .flat_map(|n| self.candidate_edges(n).expect("searchable"))
            .collect()
    }

    /// Legal edge combinations of a node in lexicographic source order.
    ///
    /// The position of a combination in this list is the index of the
    /// corresponding entry in the node's policy vector.
    pub fn enumerate_edge_combinations(
        &self,
        node: usize,
    ) -> Result<Vec<Vec<EdgeId>>, SearchSpaceError> {
        let candidates = self.candidate_edges(node)?;
        Ok(combinations(&candidates, self.fan_in))
    }

    /// Exact number of architectures in this space.
    pub fn count_architectures(&self) -> BigUint {
        let mut count = BigUint::from(1u32);
        let nodes = self.searchable_nodes();
        for &node in &nodes {
            let e = self.candidate_edges(node).expect("searchable").len();
            count *= binomial(e, self.fan_in);
        }
        let k = BigUint::from(self.op_set.len());
        let exponent = (self.fan_in * nodes.len()) as u32;
        count * k.pow(exponent)
    }

    /// Exhaustively enumerate every architecture, in a deterministic order.
    ///
    /// Refuses spaces with more than `limit` members.
    pub fn enumerate_samples(
        &self,
        limit: u64,
    ) -> Result<Vec<ArchitectureSample>, SearchSpaceError> {
        let count = self.count_architectures();
        if count > BigUint::from(limit) {
            return Err(SearchSpaceError::EnumerationTooLarge { count, limit });
        }
        // Per node: every (combination, op tuple) pairing.
        let mut per_node: Vec<Vec<NodeAssignment>> = Vec::new();
        for node in self.searchable_nodes() {
            let combos = self.enumerate_edge_combinations(node)?;
            let op_tuples = cartesian_power(&self.op_set, self.fan_in);
            let mut options = Vec::new();
            for combo in &combos {
                for ops in &op_tuples {
                    options.push(NodeAssignment {
                        node,
                        edges: combo.clone(),
                        ops: ops.clone(),
                    });
                }
            }
            per_node.push(options);
        }
        let mut samples = vec![ArchitectureSample {
            kind: self.kind,
            assignments: Vec::new(),
        }];
        for options in &per_node {
            let mut next = Vec::with_capacity(samples.len() * options.len());
            for sample in &samples {
                for option in options {
                    let mut s = sample.clone();
                    s.assignments.push(option.clone());
                    next.push(s);
                }
            }
            samples = next;
        }
        Ok(samples)
    }

    /// Check a sample against this template. Collects all violations instead
    /// of stopping at the first.
    pub fn validate(&self, sample: &ArchitectureSample) -> ValidationReport {
        let mut violations = Vec::new();
        if sample.kind != self.kind {
            violations.push(Violation::UnexpectedNode { node: usize::MAX });
            return ValidationReport { violations };
        }
        let expected: Vec<usize> = self.searchable_nodes();
        let assigned: BTreeSet<usize> = sample.assignments.iter().map(|a| a.node).collect();
        for &node in &expected {
            if !assigned.contains(&node) {
                violations.push(Violation::MissingNode { node });
            }
        }
        for a in &sample.assignments {
            if !expected.contains(&a.node) {
                violations.push(Violation::UnexpectedNode { node: a.node });
                continue;
            }
            if a.edges.len() != self.fan_in {
                violations.push(Violation::WrongEdgeCount {
                    node: a.node,
                    expected: self.fan_in,
                    got: a.edges.len(),
                });
            }
            let candidates = self.candidate_edges(a.node).expect("searchable");
            let mut seen = BTreeSet::new();
            for &edge in &a.edges {
                if edge.dst != a.node {
                    violations.push(Violation::WrongDestination { node: a.node, edge });
                    continue;
                }
                if !seen.insert(edge) {
                    violations.push(Violation::DuplicateEdge { node: a.node, edge });
                    continue;
                }
                if !candidates.contains(&edge) {
                    violations.push(Violation::UnknownEdge { node: a.node, edge });
                }
            }
            if a.ops.len() != a.edges.len() {
                violations.push(Violation::OpCountMismatch {
                    node: a.node,
                    expected: a.edges.len(),
                    got: a.ops.len(),
                });
            }
            for (&edge, &op) in a.edges.iter().zip(a.ops.iter()) {
                if !self.op_set.contains(&op) {
                    violations.push(Violation::OpOutsideSet { edge, op });
                }
            }
        }
        ValidationReport { violations }
    }

    /// Index of a node's chosen combination in its policy-vector order.
    pub fn combination_index(
        &self,
        node: usize,
        edges: &[EdgeId],
    ) -> Result<usize, SearchSpaceError> {
        let mut sorted = edges.to_vec();
        sorted.sort();
        self.enumerate_edge_combinations(node)?
            .iter()
            .position(|c| c == &sorted)
            .ok_or(SearchSpaceError::NotSearchable(node))
    }

    /// Lossless plain-text (TOML) serialization.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    pub fn from_toml(text: &str) -> Result<CellTemplate, SearchSpaceError> {
        toml::from_str(text).map_err(|e| SearchSpaceError::BadTemplate(e.to_string()))
    }
}

/// All `r`-element subsets in lexicographic order.
fn combinations(items: &[EdgeId], r: usize) -> Vec<Vec<EdgeId>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(r);
    fn rec(items: &[EdgeId], r: usize, start: usize, current: &mut Vec<EdgeId>, out: &mut Vec<Vec<EdgeId>>) {
        if current.len() == r {
            out.push(current.clone());
            return;
        }
        for i in start..items.len() {
            current.push(items[i]);
            rec(items, r, i + 1, current, out);
            current.pop();
        }
    }
    rec(items, r, 0, &mut current, &mut out);
    out
}

fn cartesian_power(ops: &[OperationKind], n: usize) -> Vec<Vec<OperationKind>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        let mut next = Vec::with_capacity(out.len() * ops.len());
        for tuple in &out {
            for &op in ops {
                let mut t = tuple.clone();
                t.push(op);
                next.push(t);
            }
        }
        out = next;
    }
    out
}

/// Exact binomial coefficient.
pub fn binomial(n: usize, r: usize) -> BigUint {
    if r > n {
        return BigUint::from(0u32);
    }
    let mut num = BigUint::from(1u32);
    for i in 0..r {
        num *= BigUint::from(n - i);
        num /= BigUint::from(i + 1);
    }
    num
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(n: usize, ops: usize) -> CellTemplate {
        let op_set = OperationKind::conv_set().into_iter().take(ops).collect();
        CellTemplate::conv(CellKind::ConvNormal, n, op_set).unwrap()
    }

    fn rnn(n: usize, acts: usize) -> CellTemplate {
        let set = OperationKind::recurrent_set().into_iter().take(acts).collect();
        CellTemplate::recurrent(n, set).unwrap()
    }

    #[test]
    fn op_set_sizes() {
        assert_eq!(OperationKind::conv_set().len(), 7);
        assert_eq!(OperationKind::recurrent_set().len(), 4);
    }

    #[test]
    fn conv_template_shape() {
        let t = conv(6, 7);
        assert_eq!(t.searchable_nodes(), vec![2, 3, 4, 5]);
        let e: Vec<usize> = t
            .searchable_nodes()
            .iter()
            .map(|&n| t.candidate_edges(n).unwrap().len())
            .collect();
        assert_eq!(e, vec![2, 3, 4, 5]);
        assert_eq!(t.all_edges().len(), 14);
    }

    #[test]
    fn conv_smallest_template() {
        let t = conv(3, 2);
        assert_eq!(t.searchable_nodes(), vec![2]);
        assert_eq!(t.enumerate_edge_combinations(2).unwrap().len(), 1);
    }

    #[test]
    fn conv_fig2_template() {
        // 5 nodes: inputs n0, n1 and searchable n2..n4.
        let t = conv(5, 3);
        assert_eq!(t.searchable_nodes(), vec![2, 3, 4]);
        assert_eq!(t.candidate_edges(4).unwrap().len(), 4);
    }

    #[test]
    fn conv_rejects_too_small() {
        let err = CellTemplate::conv(CellKind::ConvNormal, 2, OperationKind::conv_set());
        assert_eq!(err.unwrap_err(), SearchSpaceError::TooFewConvNodes(2));
    }

    #[test]
    fn recurrent_template_shape() {
        let t = rnn(9, 4);
        let nodes = t.searchable_nodes();
        assert_eq!(nodes.len(), 8);
        let e: Vec<usize> = nodes
            .iter()
            .map(|&n| t.candidate_edges(n).unwrap().len())
            .collect();
        assert_eq!(e, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn recurrent_minimal_and_fig3() {
        let t = rnn(2, 4);
        assert_eq!(t.searchable_nodes(), vec![3]);
        assert_eq!(t.candidate_edges(3).unwrap(), vec![EdgeId::new(2, 3)]);
        let t4 = rnn(4, 3);
        assert_eq!(t4.searchable_nodes().len(), 3);
        assert!(CellTemplate::recurrent(1, OperationKind::recurrent_set()).is_err());
    }

    #[test]
    fn edge_combination_counts() {
        let t = conv(6, 7);
        assert_eq!(t.enumerate_edge_combinations(3).unwrap().len(), 3); // C(3,2)
        assert_eq!(t.enumerate_edge_combinations(5).unwrap().len(), 10); // C(5,2)
        let r = rnn(9, 4);
        assert_eq!(r.enumerate_edge_combinations(6).unwrap().len(), 4); // C(4,1)
        assert!(t.enumerate_edge_combinations(0).is_err());
    }

    #[test]
    fn combination_order_is_lexicographic() {
        let t = conv(5, 3);
        let combos = t.enumerate_edge_combinations(3).unwrap();
        let srcs: Vec<(usize, usize)> = combos
            .iter()
            .map(|c| (c[0].src, c[1].src))
            .collect();
        assert_eq!(srcs, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn flagship_counts_exact() {
        assert_eq!(
            conv(6, 7).count_architectures(),
            BigUint::from(1_037_664_180u64)
        );
        assert_eq!(
            rnn(9, 4).count_architectures(),
            BigUint::from(2_642_411_520u64)
        );
    }

    #[test]
    fn tiny_count_matches_enumeration() {
        let t = conv(3, 2);
        assert_eq!(t.count_architectures(), BigUint::from(4u32));
        let samples = t.enumerate_samples(100).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert!(t.validate(s).is_valid());
        }
    }

    #[test]
    fn enumeration_matches_formula_on_small_spaces() {
        for t in [conv(3, 2), conv(4, 2), conv(4, 3), conv(5, 2)] {
            let count = t.count_architectures();
            let samples = t.enumerate_samples(100_000).unwrap();
            assert_eq!(BigUint::from(samples.len()), count);
            // All distinct.
            let set: BTreeSet<String> = samples.iter().map(|s| s.encode()).collect();
            assert_eq!(set.len(), samples.len());
        }
        for t in [rnn(2, 4), rnn(3, 4), rnn(4, 3), rnn(5, 2)] {
            let samples = t.enumerate_samples(100_000).unwrap();
            assert_eq!(BigUint::from(samples.len()), t.count_architectures());
        }
    }

    #[test]
    fn enumeration_refuses_large_spaces() {
        let err = conv(6, 7).enumerate_samples(1000).unwrap_err();
        assert!(matches!(err, SearchSpaceError::EnumerationTooLarge { .. }));
    }

    #[test]
    fn validate_fig2_style_sample() {
        // n3 fed by n0 and n2, n4 fed by n2 and n3; n2 must also be assigned.
        let t = conv(5, 3);
        let op = OperationKind::SepConv3x3;
        let sample = ArchitectureSample {
            kind: CellKind::ConvNormal,
            assignments: vec![
                NodeAssignment {
                    node: 2,
                    edges: vec![EdgeId::new(0, 2), EdgeId::new(1, 2)],
                    ops: vec![op, op],
                },
                NodeAssignment {
                    node: 3,
                    edges: vec![EdgeId::new(0, 3), EdgeId::new(2, 3)],
                    ops: vec![op, op],
                },
                NodeAssignment {
                    node: 4,
                    edges: vec![EdgeId::new(2, 4), EdgeId::new(3, 4)],
                    ops: vec![op, op],
                },
            ],
        };
        assert!(t.validate(&sample).is_valid());
    }

    #[test]
    fn validate_rejects_duplicate_edge() {
        let t = conv(3, 2);
        let op = OperationKind::SepConv3x3;
        let sample = ArchitectureSample {
            kind: CellKind::ConvNormal,
            assignments: vec![NodeAssignment {
                node: 2,
                edges: vec![EdgeId::new(0, 2), EdgeId::new(0, 2)],
                ops: vec![op, op],
            }],
        };
        let report = t.validate(&sample);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateEdge { .. })));
    }

    #[test]
    fn validate_rejects_foreign_op() {
        let t = conv(3, 2); // op set: sep_conv_3x3, sep_conv_5x5
        let sample = ArchitectureSample {
            kind: CellKind::ConvNormal,
            assignments: vec![NodeAssignment {
                node: 2,
                edges: vec![EdgeId::new(0, 2), EdgeId::new(1, 2)],
                ops: vec![OperationKind::MaxPool3x3, OperationKind::SepConv3x3],
            }],
        };
        let report = t.validate(&sample);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::OpOutsideSet { .. })));
    }

    #[test]
    fn sample_encode_roundtrip() {
        let t = conv(4, 3);
        for s in t.enumerate_samples(100_000).unwrap() {
            assert_eq!(ArchitectureSample::decode(&s.encode()).unwrap(), s);
        }
    }

    #[test]
    fn template_toml_roundtrip() {
        for t in [conv(6, 7), rnn(9, 4)] {
            let text = t.to_toml();
            assert_eq!(CellTemplate::from_toml(&text).unwrap(), t);
        }
    }

    #[test]
    fn combination_index_inverts_enumeration() {
        let t = conv(6, 7);
        for node in t.searchable_nodes() {
            let combos = t.enumerate_edge_combinations(node).unwrap();
            for (i, c) in combos.iter().enumerate() {
                assert_eq!(t.combination_index(node, c).unwrap(), i);
            }
        }
    }

    #[test]
    fn binomial_basics() {
        assert_eq!(binomial(5, 2), BigUint::from(10u32));
        assert_eq!(binomial(2, 2), BigUint::from(1u32));
        assert_eq!(binomial(1, 2), BigUint::from(0u32));
    }
}
