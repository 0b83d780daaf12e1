//! Observability exports: policy heat-map snapshots, cumulative sampling
//! ledgers, and DOT graphs of sampled cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicySet;
use crate::searchspace::{
    ArchitectureSample, CellKind, CellTemplate, EdgeId, OutputAggregation, SearchSpaceError,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid sample: {0:?}")]
    InvalidSample(Vec<crate::searchspace::Violation>),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// One row of a snapshot table: a label plus the softmaxed probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub label: String,
    pub probs: Vec<f64>,
}

/// Softmaxed policy tables of one cell kind at one point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSnapshot {
    pub kind: CellKind,
    /// Operation names, the heat-map columns.
    pub op_names: Vec<String>,
    /// One row per candidate edge, labeled `"src,dst"`.
    pub edge_rows: Vec<SnapshotRow>,
    /// One row per searchable node, labeled by node index; ragged widths.
    pub node_rows: Vec<SnapshotRow>,
}

/// Timestamped export of all softmaxed policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub kinds: Vec<KindSnapshot>,
}

/// Pure read of the current sampling distributions.
pub fn snapshot_policies(policies: &PolicySet, epoch: usize) -> Result<Snapshot, AnalyticsError> {
    let mut kinds = Vec::new();
    for (kind, template) in &policies.templates {
        let op_names = template.op_set.iter().map(|o| o.name().to_string()).collect();
        let mut edge_rows = Vec::new();
        for edge in template.all_edges() {
            let logits = &policies.logits.edge[&(*kind, edge)];
            edge_rows.push(SnapshotRow {
                label: edge.label(),
                probs: policies.distribution(logits)?,
            });
        }
        let mut node_rows = Vec::new();
        for node in template.searchable_nodes() {
            let logits = &policies.logits.node[&(*kind, node)];
            node_rows.push(SnapshotRow {
                label: node.to_string(),
                probs: policies.distribution(logits)?,
            });
        }
        kinds.push(KindSnapshot {
            kind: *kind,
            op_names,
            edge_rows,
            node_rows,
        });
    }
    Ok(Snapshot { epoch, kinds })
}

/// Cumulative sampling counts, bucketed by epoch ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLedger {
    pub bucket_width: usize,
    #[serde(with = "crate::serde_pairs")]
    pub buckets: BTreeMap<usize, BucketCounts>,
    #[serde(with = "crate::serde_pairs")]
    templates: BTreeMap<CellKind, CellTemplate>,
}

/// Counters of one epoch bucket.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketCounts {
    /// Per (kind, node): counts over the node's edge combinations.
    #[serde(with = "crate::serde_pairs")]
    pub node: BTreeMap<(CellKind, usize), Vec<u64>>,
    /// Per (kind, edge): counts over operations.
    #[serde(with = "crate::serde_pairs")]
    pub edge: BTreeMap<(CellKind, EdgeId), Vec<u64>>,
    /// Architectures recorded per kind.
    #[serde(with = "crate::serde_pairs")]
    pub samples: BTreeMap<CellKind, u64>,
}

impl SampleLedger {
    pub fn new(templates: &[CellTemplate], bucket_width: usize) -> SampleLedger {
        assert!(bucket_width > 0);
        SampleLedger {
            bucket_width,
            buckets: BTreeMap::new(),
            templates: templates.iter().map(|t| (t.kind, t.clone())).collect(),
        }
    }

    /// Count one sampled architecture into the bucket of `epoch`.
    pub fn record_sample(
        &mut self,
        epoch: usize,
        sample: &ArchitectureSample,
    ) -> Result<(), AnalyticsError> {
        let template = self
            .templates
            .get(&sample.kind)
            .ok_or(SearchSpaceError::KindMismatch(sample.kind))?;
        let report = template.validate(sample);
        if !report.is_valid() {
            return Err(AnalyticsError::InvalidSample(report.violations));
        }
        let bucket_index = epoch / self.bucket_width;
        let bucket = self.buckets.entry(bucket_index).or_default();
        for a in &sample.assignments {
            let combos = template.enumerate_edge_combinations(a.node)?;
            let combo_index = template.combination_index(a.node, &a.edges)?;
            bucket
                .node
                .entry((sample.kind, a.node))
                .or_insert_with(|| vec![0; combos.len()])[combo_index] += 1;
            for (&edge, &op) in a.edges.iter().zip(a.ops.iter()) {
                let op_index = template.op_set.iter().position(|&o| o == op).unwrap();
                bucket
                    .edge
                    .entry((sample.kind, edge))
                    .or_insert_with(|| vec![0; template.op_set.len()])[op_index] += 1;
            }
        }
        *bucket.samples.entry(sample.kind).or_insert(0) += 1;
        Ok(())
    }

    /// CSV export: `bucket,kind,table,label,option,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,kind,table,label,option,count\n");
        for (bucket_index, bucket) in &self.buckets {
            let start = bucket_index * self.bucket_width;
            let end = start + self.bucket_width - 1;
            let range = format!("{start}-{end}");
            for ((kind, node), counts) in &bucket.node {
                for (i, c) in counts.iter().enumerate() {
                    out.push_str(&format!("{range},{kind},node,{node},{i},{c}\n"));
                }
            }
            for ((kind, edge), counts) in &bucket.edge {
                let template = &self.templates[kind];
                for (i, c) in counts.iter().enumerate() {
                    out.push_str(&format!(
                        "{range},{kind},edge,\"{}\",{},{c}\n",
                        edge.label(),
                        template.op_set[i].name()
                    ));
                }
            }
        }
        out
    }
}

/// The heat-map CSV documents of one cell kind.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCsv {
    pub kind: CellKind,
    /// Rows are edges `"src,dst"`, columns are operations.
    pub edges: String,
    /// Rows are nodes, ragged columns are combination probabilities.
    pub nodes: String,
}

/// Render a snapshot as CSV documents, probabilities fixed to 6 decimals.
/// Byte-stable for identical snapshots.
pub fn export_heatmap_csv(snapshot: &Snapshot) -> Vec<HeatmapCsv> {
    snapshot
        .kinds
        .iter()
        .map(|ks| {
            let mut edges = String::from("edge");
            for name in &ks.op_names {
                edges.push(',');
                edges.push_str(name);
            }
            edges.push('\n');
            for row in &ks.edge_rows {
                edges.push_str(&format!("\"{}\"", row.label));
                for p in &row.probs {
                    edges.push_str(&format!(",{p:.6}"));
                }
                edges.push('\n');
            }
            let mut nodes = String::from("node,combination_probabilities...\n");
            for row in &ks.node_rows {
                nodes.push_str(&row.label);
                for p in &row.probs {
                    nodes.push_str(&format!(",{p:.6}"));
                }
                nodes.push('\n');
            }
            HeatmapCsv {
                kind: ks.kind,
                edges,
                nodes,
            }
        })
        .collect()
}

/// Render a sampled cell as a DOT graph.
///
/// Input nodes are dashed boxes, all other nodes solid boxes; edges carry
/// the operation name. Node ordering is deterministic.
pub fn export_dot(
    sample: &ArchitectureSample,
    template: &CellTemplate,
) -> Result<String, AnalyticsError> {
    let report = template.validate(sample);
    if !report.is_valid() {
        return Err(AnalyticsError::InvalidSample(report.violations));
    }
    let mut out = String::from("digraph cell {\n  rankdir=TB;\n");
    for i in 0..template.num_inputs {
        out.push_str(&format!(
            "  n{i} [label=\"in{i}\", shape=box, style=dashed];\n"
        ));
    }
    if let Some(fixed) = template.first_hidden_node() {
        out.push_str(&format!("  n{fixed} [label=\"n{fixed}\", shape=box];\n"));
    }
    for a in &sample.assignments {
        out.push_str(&format!("  n{0} [label=\"n{0}\", shape=box];\n", a.node));
    }
    let agg = match template.output_aggregation {
        OutputAggregation::ChannelConcat => "concat",
        OutputAggregation::Mean => "mean",
    };
    out.push_str(&format!("  out [label=\"{agg}\", shape=ellipse];\n"));
    if let Some(fixed) = template.first_hidden_node() {
        for i in 0..template.num_inputs {
            out.push_str(&format!("  n{i} -> n{fixed} [label=\"tanh\"];\n"));
        }
    }
    for a in &sample.assignments {
        for (&edge, &op) in a.edges.iter().zip(a.ops.iter()) {
            out.push_str(&format!(
                "  n{} -> n{} [label=\"{}\"];\n",
                edge.src,
                edge.dst,
                op.name()
            ));
        }
    }
    // Hidden nodes feed the output aggregation.
    if let Some(fixed) = template.first_hidden_node() {
        out.push_str(&format!("  n{fixed} -> out;\n"));
    }
    for a in &sample.assignments {
        out.push_str(&format!("  n{} -> out;\n", a.node));
    }
    out.push_str("}\n");
    Ok(out)
}
