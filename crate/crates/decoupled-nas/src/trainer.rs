//! The search loop: alternating child training on shared weights and
//! REINFORCE updates on the policies, plus derivation of the final
//! architecture, the random-search baseline, and bit-exact checkpointing.
//!
//! Determinism contract: all randomness flows through four named ChaCha
//! streams (child sampling, policy sampling, derivation, reward noise /
//! dropout) that are part of the serialized state, so a resumed run is
//! indistinguishable from an uninterrupted one.

use std::path::Path;

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{snapshot_policies, SampleLedger, Snapshot};
use crate::datasets::{self, LabeledSet};
use crate::policy::{AdamState, PolicyError, PolicySet, PolicyTable};
use crate::reward::{perplexity_reward, Baseline, RewardError, TabularOracle};
use crate::searchspace::{ArchitectureSample, CellKind, CellTemplate, OperationKind, SearchSpaceError};
use crate::supernet::{
    ConvChildView, ConvNetworkConfig, ConvSupernet, RnnNetworkConfig, RnnSupernet, SupernetError,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SearchSpaceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Supernet(#[from] SupernetError),
    #[error(transparent)]
    Analytics(#[from] crate::analytics::AnalyticsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is newer than supported version {supported}")]
    FutureVersion { found: u32, supported: u32 },
    #[error("training aborted: {0}")]
    Aborted(String),
}

/// Which reward source and search space to run against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Synthetic planted-optimum reward table over a conv cell space.
    Tabular {
        num_nodes: usize,
        ops: Vec<String>,
        #[serde(default)]
        noise: f64,
    },
    /// Image classification on the toy textured set via the conv supernet.
    ConvToy {
        num_nodes: usize,
        ops: Vec<String>,
        channels: usize,
        cells_per_stage: usize,
        num_reduction: usize,
        image_size: usize,
        classes: usize,
        per_class_train: usize,
        per_class_val: usize,
        #[serde(default = "default_image_noise")]
        noise: f64,
    },
    /// Character modeling on the toy corpus via the recurrent supernet.
    CharRnn {
        num_hidden: usize,
        acts: Vec<String>,
        vocab: usize,
        embedding: usize,
        hidden: usize,
        seq_len: usize,
        #[serde(default)]
        dropout: f64,
        train_len: usize,
        val_len: usize,
        /// Reward scale: R = c / ppl.
        reward_c: f64,
    },
}

fn default_image_noise() -> f64 {
    0.1
}

/// Full hyperparameter surface, TOML-loadable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub child_steps_per_epoch: usize,
    pub policy_steps_per_epoch: usize,
    /// Candidates drawn during derivation.
    pub derivation_samples: usize,
    /// Epoch cadence of policy snapshots (0 disables).
    pub snapshot_every: usize,
    /// Epoch width of the cumulative sampling buckets.
    pub bucket_width: usize,
    pub seed: u64,
    pub policy_lr: f64,
    pub temperature: f64,
    pub baseline_decay: f64,
    pub child_lr: f64,
    pub child_momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    /// Re-draw the reward minibatch for every derivation candidate instead
    /// of scoring them all on one shared batch.
    pub resample_derivation_batch: bool,
    /// Count only policy-phase samples in the ledger.
    pub ledger_policy_phase_only: bool,
    pub task: TaskConfig,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            epochs: 50,
            child_steps_per_epoch: 4,
            policy_steps_per_epoch: 4,
            derivation_samples: 100,
            snapshot_every: 10,
            bucket_width: 50,
            seed: 0,
            policy_lr: 0.0035,
            temperature: 1.0,
            baseline_decay: 0.95,
            child_lr: 0.05,
            child_momentum: 0.9,
            nesterov: true,
            batch_size: 8,
            resample_derivation_batch: false,
            ledger_policy_phase_only: false,
            task: TaskConfig::Tabular {
                num_nodes: 3,
                ops: vec!["sep_conv_3x3".into(), "identity".into()],
                noise: 0.0,
            },
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<SearchConfig, TrainerError> {
        toml::from_str(text).map_err(|e| TrainerError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn parse_ops(names: &[String]) -> Result<Vec<OperationKind>, TrainerError> {
    if names.is_empty() {
        return Err(TrainerError::Config("empty operation set".into()));
    }
    names
        .iter()
        .map(|n| OperationKind::parse(n).map_err(TrainerError::from))
        .collect()
}

/// Reward source plus whatever trains alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskState {
    Tabular {
        oracle: TabularOracle,
    },
    ConvToy {
        supernet: ConvSupernet,
        train: LabeledSet,
        val: LabeledSet,
    },
    CharRnn {
        supernet: RnnSupernet,
        train: Vec<usize>,
        val: Vec<usize>,
        reward_c: f64,
    },
}

impl TaskState {
    /// Templates of the searched cell kinds, in policy order.
    pub fn templates(&self) -> Vec<CellTemplate> {
        match self {
            TaskState::Tabular { oracle } => vec![oracle.template.clone()],
            TaskState::ConvToy { supernet, .. } => {
                vec![supernet.normal.clone(), supernet.reduction.clone()]
            }
            TaskState::CharRnn { supernet, .. } => vec![supernet.template.clone()],
        }
    }

    fn has_child_weights(&self) -> bool {
        !matches!(self, TaskState::Tabular { .. })
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: Option<f64>,
    pub reward: Option<f64>,
    pub baseline: Option<f64>,
}

pub fn metrics_to_csv(rows: &[MetricsRow], wall_clock_ms: u128) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut out = String::from("epoch,phase,loss,reward,baseline,wall_clock_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.phase,
            fmt(r.loss),
            fmt(r.reward),
            fmt(r.baseline),
            wall_clock_ms
        ));
    }
    out
}

/// The derived architecture(s) with the reward they scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    /// One sample per searched cell kind, in template order.
    pub samples: Vec<ArchitectureSample>,
    pub reward: f64,
}

/// Outcome of a full search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub derived: Derived,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<Snapshot>,
    /// Wall-clock accounting, excluded from reproducibility comparisons.
    pub wall_clock_ms: u128,
}

/// Complete serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: SearchConfig,
    pub policies: PolicySet,
    pub adam: AdamState,
    pub baseline: Baseline,
    pub task: TaskState,
    pub ledger: SampleLedger,
    pub epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<Snapshot>,
    /// When set, policy updates are skipped: the random-search baseline.
    pub random_mode: bool,
    train_cursor: usize,
    val_cursor: usize,
    rng_child: ChaCha20Rng,
    rng_policy: ChaCha20Rng,
    rng_derive: ChaCha20Rng,
    rng_noise: ChaCha20Rng,
}

impl TrainerState {
    /// Build the task and all state from the config, fully seeded.
    pub fn new(config: SearchConfig) -> Result<TrainerState, TrainerError> {
        let mut data_rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(17));
        let task = match &config.task {
            TaskConfig::Tabular { num_nodes, ops, noise } => {
                let template =
                    CellTemplate::conv(CellKind::ConvNormal, *num_nodes, parse_ops(ops)?)?;
                let oracle = TabularOracle::planted(template, *noise, &mut data_rng)
                    .map_err(|e| TrainerError::Config(e.to_string()))?;
                TaskState::Tabular { oracle }
            }
            TaskConfig::ConvToy {
                num_nodes,
                ops,
                channels,
                cells_per_stage,
                num_reduction,
                image_size,
                classes,
                per_class_train,
                per_class_val,
                noise,
            } => {
                let net_config = ConvNetworkConfig {
                    channels: *channels,
                    cells_per_stage: *cells_per_stage,
                    num_reduction: *num_reduction,
                    input_channels: 1,
                    input_hw: *image_size,
                    num_classes: *classes,
                    };
                let supernet =
                    ConvSupernet::build(*num_nodes, parse_ops(ops)?, net_config, config.seed)?;
                let train = datasets::textured_images(
                    *per_class_train,
                    *classes,
                    *image_size,
                    *noise,
                    &mut data_rng,
                );
                let val = datasets::textured_images(
                    *per_class_val,
                    *classes,
                    *image_size,
                    *noise,
                    &mut data_rng,
                );
                TaskState::ConvToy { supernet, train, val }
            }
            TaskConfig::CharRnn {
                num_hidden,
                acts,
                vocab,
                embedding,
                hidden,
                seq_len,
                dropout,
                train_len,
                val_len,
                reward_c,
            } => {
                let net_config = RnnNetworkConfig {
                    vocab: *vocab,
                    embedding: *embedding,
                    hidden: *hidden,
                    seq_len: *seq_len,
                    dropout: *dropout,
                };
                let supernet =
                    RnnSupernet::build(*num_hidden, parse_ops(acts)?, net_config, config.seed)?;
                let train = datasets::char_corpus(*train_len, *vocab, &mut data_rng);
                let val = datasets::char_corpus(*val_len, *vocab, &mut data_rng);
                TaskState::CharRnn {
                    supernet,
                    train,
                    val,
                    reward_c: *reward_c,
                }
            }
        };
        Self::with_task(config, task)
    }

    /// Build state around an explicit task (used by tests and benchmarks
    /// that construct their own oracle).
    pub fn with_task(config: SearchConfig, task: TaskState) -> Result<TrainerState, TrainerError> {
        let templates = task.templates();
        let mut policies = PolicySet::init(&templates);
        policies.temperature = config.temperature;
        let adam = AdamState::new(&policies);
        let baseline = Baseline::new(config.baseline_decay);
        let ledger = SampleLedger::new(&templates, config.bucket_width.max(1));
        let seed = config.seed;
        Ok(TrainerState {
            policies,
            adam,
            baseline,
            task,
            ledger,
            epoch: 0,
            metrics: Vec::new(),
            snapshots: Vec::new(),
            random_mode: false,
            train_cursor: 0,
            val_cursor: 0,
            rng_child: ChaCha20Rng::seed_from_u64(seed.wrapping_add(1)),
            rng_policy: ChaCha20Rng::seed_from_u64(seed.wrapping_add(2)),
            rng_derive: ChaCha20Rng::seed_from_u64(seed.wrapping_add(3)),
            rng_noise: ChaCha20Rng::seed_from_u64(seed.wrapping_add(4)),
            config,
        })
    }

    /// One sample per searched kind using the given stream.
    fn sample_candidate(
        policies: &PolicySet,
        rng: &mut ChaCha20Rng,
    ) -> Result<Vec<ArchitectureSample>, TrainerError> {
        let kinds: Vec<CellKind> = policies.templates.keys().copied().collect();
        kinds
            .into_iter()
            .map(|k| policies.sample_architecture(k, rng).map_err(TrainerError::from))
            .collect()
    }

    fn record(&mut self, samples: &[ArchitectureSample]) -> Result<(), TrainerError> {
        for s in samples {
            self.ledger.record_sample(self.epoch, s)?;
        }
        Ok(())
    }

    fn conv_batch(set: &LabeledSet, cursor: &mut usize, size: usize) -> (Tensor, Vec<usize>) {
        let n = set.len();
        let per_row: usize = set.features.shape[1..].iter().product();
        let mut shape = set.features.shape.clone();
        shape[0] = size;
        let mut images = Tensor::zeros(&shape);
        let mut labels = Vec::with_capacity(size);
        for row in 0..size {
            let i = (*cursor + row) % n;
            images.data[row * per_row..(row + 1) * per_row]
                .copy_from_slice(&set.features.data[i * per_row..(i + 1) * per_row]);
            labels.push(set.labels[i]);
        }
        *cursor = (*cursor + size) % n;
        (images, labels)
    }

    /// Time-major (inputs, targets) batches from a corpus window.
    fn rnn_batch(
        corpus: &[usize],
        cursor: &mut usize,
        batch: usize,
        seq_len: usize,
    ) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let n = corpus.len();
        let mut inputs = vec![vec![0; batch]; seq_len];
        let mut targets = vec![vec![0; batch]; seq_len];
        for b in 0..batch {
            let start = (*cursor + b * (seq_len + 1)) % n;
            for t in 0..seq_len {
                inputs[t][b] = corpus[(start + t) % n];
                targets[t][b] = corpus[(start + t + 1) % n];
            }
        }
        *cursor = (*cursor + batch * (seq_len + 1)) % n;
        (inputs, targets)
    }

    /// One shared-weights training step on a fresh sample. Returns the loss,
    /// or `None` for tasks without child weights.
    fn child_step(&mut self, samples: &[ArchitectureSample]) -> Result<Option<f64>, TrainerError> {
        let batch_size = self.config.batch_size;
        let lr = self.config.child_lr;
        let momentum = (self.config.child_momentum > 0.0).then_some(self.config.child_momentum);
        match &mut self.task {
            TaskState::Tabular { .. } => Ok(None),
            TaskState::ConvToy { supernet, train, .. } => {
                let (images, labels) = Self::conv_batch(train, &mut self.train_cursor, batch_size);
                let view = ConvChildView {
                    normal: samples[0].clone(),
                    reduction: samples[1].clone(),
                };
                let loss = supernet.child_sgd_step(
                    &view,
                    &images,
                    &labels,
                    lr,
                    momentum,
                    self.config.nesterov,
                )?;
                Ok(Some(loss))
            }
            TaskState::CharRnn { supernet, train, .. } => {
                let seq_len = supernet.config.seq_len;
                let (inputs, targets) =
                    Self::rnn_batch(train, &mut self.train_cursor, batch_size, seq_len);
                let h0 = Tensor::zeros(&[batch_size, supernet.config.hidden]);
                let loss = supernet.child_sgd_step(
                    &samples[0],
                    &inputs,
                    &targets,
                    &h0,
                    lr,
                    &mut self.rng_noise,
                )?;
                Ok(Some(loss))
            }
        }
    }

    /// Score a candidate on one validation minibatch (or the oracle).
    /// `advance` controls whether the validation cursor moves.
    fn measure_reward(
        &mut self,
        samples: &[ArchitectureSample],
        advance: bool,
    ) -> Result<f64, TrainerError> {
        let batch_size = self.config.batch_size;
        let mut cursor = self.val_cursor;
        let reward = match &self.task {
            TaskState::Tabular { oracle } => oracle.reward(&samples[0], &mut self.rng_noise)?,
            TaskState::ConvToy { supernet, val, .. } => {
                let (images, labels) = Self::conv_batch(val, &mut cursor, batch_size);
                let view = ConvChildView {
                    normal: samples[0].clone(),
                    reduction: samples[1].clone(),
                };
                supernet.evaluate_accuracy(&view, &images, &labels)?
            }
            TaskState::CharRnn {
                supernet,
                val,
                reward_c,
                ..
            } => {
                let seq_len = supernet.config.seq_len;
                let (inputs, targets) = Self::rnn_batch(val, &mut cursor, batch_size, seq_len);
                let h0 = Tensor::zeros(&[batch_size, supernet.config.hidden]);
                let loss = supernet.evaluate_mean_loss(&samples[0], &inputs, &targets, &h0)?;
                perplexity_reward(loss, *reward_c)?
            }
        };
        if advance {
            self.val_cursor = cursor;
        }
        Ok(reward)
    }

    /// One REINFORCE + Adam ascent step over all searched kinds.
    fn policy_update(
        &mut self,
        samples: &[ArchitectureSample],
        advantage: f64,
    ) -> Result<(), TrainerError> {
        let mut total = PolicyTable::zeros_like(&self.policies.logits);
        for s in samples {
            let g = self.policies.reinforce_grad(s, advantage)?;
            total.add_assign(&g)?;
        }
        self.policies
            .adam_step(&total, &mut self.adam, self.config.policy_lr)?;
        Ok(())
    }

    /// One epoch: child phase then policy phase, with snapshots on cadence.
    pub fn run_epoch(&mut self) -> Result<(), TrainerError> {
        if self.config.snapshot_every > 0 && self.epoch % self.config.snapshot_every == 0 {
            self.snapshots.push(snapshot_policies(&self.policies, self.epoch)?);
        }
        if self.task.has_child_weights() {
            for _ in 0..self.config.child_steps_per_epoch {
                let samples = Self::sample_candidate(&self.policies, &mut self.rng_child)?;
                if !self.config.ledger_policy_phase_only {
                    self.record(&samples)?;
                }
                let loss = self.child_step(&samples)?;
                self.metrics.push(MetricsRow {
                    epoch: self.epoch,
                    phase: "child".into(),
                    loss,
                    reward: None,
                    baseline: None,
                });
            }
        }
        for _ in 0..self.config.policy_steps_per_epoch {
            let samples = Self::sample_candidate(&self.policies, &mut self.rng_policy)?;
            self.record(&samples)?;
            let reward = self.measure_reward(&samples, true)?;
            let advantage = self.baseline.observe(reward)?;
            if !self.random_mode {
                self.policy_update(&samples, advantage)?;
            }
            self.metrics.push(MetricsRow {
                epoch: self.epoch,
                phase: "policy".into(),
                loss: None,
                reward: Some(reward),
                baseline: self.baseline.value(),
            });
        }
        self.epoch += 1;
        Ok(())
    }

    /// Sample `n` candidates from the current policies and keep the one with
    /// the best measured reward; ties go to the earliest draw.
    pub fn derive_architecture(&mut self, n: usize) -> Result<Derived, TrainerError> {
        assert!(n >= 1, "derivation needs at least one candidate");
        let mut best: Option<Derived> = None;
        for _ in 0..n {
            let samples = Self::sample_candidate(&self.policies, &mut self.rng_derive)?;
            let reward = self.measure_reward(&samples, self.config.resample_derivation_batch)?;
            let better = match &best {
                Some(b) => reward > b.reward,
                None => true,
            };
            if better {
                best = Some(Derived { samples, reward });
            }
        }
        Ok(best.expect("n >= 1"))
    }

    /// Run the configured number of epochs, then derive.
    pub fn run_search(&mut self) -> Result<SearchResult, TrainerError> {
        let started = std::time::Instant::now();
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        let derived = self.derive_architecture(self.config.derivation_samples.max(1))?;
        Ok(SearchResult {
            derived,
            metrics: self.metrics.clone(),
            snapshots: self.snapshots.clone(),
            wall_clock_ms: started.elapsed().as_millis(),
        })
    }

    /// The random-search baseline: identical budget and sampling streams,
    /// but the policies never leave uniform.
    pub fn run_random_search(&mut self) -> Result<SearchResult, TrainerError> {
        self.random_mode = true;
        self.run_search()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    state: TrainerState,
}

pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<(), TrainerError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| TrainerError::CorruptCheckpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState, TrainerError> {
    let text = std::fs::read_to_string(path)?;
    // Peek at the version first so future formats fail cleanly.
    let head: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| TrainerError::CorruptCheckpoint(e.to_string()))?;
    let version = head
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| TrainerError::CorruptCheckpoint("missing version field".into()))?
        as u32;
    if version > CHECKPOINT_VERSION {
        return Err(TrainerError::FutureVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| TrainerError::CorruptCheckpoint(e.to_string()))?;
    Ok(file.state)
}
