//! Desk-scale neural architecture search with decoupled structure and
//! operation sampling.
//!
//! The search space is a DAG cell. Two families of policy vectors define
//! categorical distributions over incoming-edge combinations (one vector per
//! non-input node) and over operations (one vector per candidate edge).
//! Architectures are drawn in two steps: structure first, then one operation
//! per selected edge. The policies are trained with REINFORCE against either
//! a weight-shared supernet or a synthetic tabular reward oracle, and every
//! intermediate quantity is exportable for inspection.
//!
//! Module map:
//! - [`searchspace`]: cell templates, edge-combination enumeration, exact
//!   cardinality counts, sample validation
//! - [`policy`]: policy vectors, decoupled sampling, log-probabilities,
//!   REINFORCE gradient, Adam
//! - [`tensor`]: minimal dense-array engine with reverse-mode autodiff
//! - [`supernet`]: shared-weight store and child model assembly/training
//! - [`reward`]: reward oracles and the moving-average baseline
//! - [`trainer`]: alternating optimization loop, derivation, checkpoints
//! - [`analytics`]: policy snapshots, sampling ledgers, CSV/DOT exports
//! - [`cli`]: command-line entry points
//! - [`datasets`]: seeded toy datasets

pub mod analytics;
pub mod cli;
pub mod datasets;
pub mod policy;
pub mod reward;
pub mod searchspace;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub(crate) mod serde_pairs;
