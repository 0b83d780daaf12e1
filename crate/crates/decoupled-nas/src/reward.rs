//! Reward oracles and the moving-average baseline.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{ArchitectureSample, CellTemplate, SearchSpaceError};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward must be finite")]
    NonFiniteReward,
    #[error("loss must be finite")]
    NonFiniteLoss,
    #[error("reward constant c must be positive")]
    BadConstant,
    #[error("sample does not belong to the oracle's template: {0:?}")]
    TemplateMismatch(Vec<crate::searchspace::Violation>),
    #[error("empty minibatch")]
    EmptyMinibatch,
    #[error("malformed oracle table: {0}")]
    BadTable(String),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
}

/// Exponential moving average of rewards, subtracted from each reward to
/// reduce gradient variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    value: f64,
    decay: f64,
    initialized: bool,
}

impl Baseline {
    pub fn new(decay: f64) -> Baseline {
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0,1)");
        Baseline {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.initialized.then_some(self.value)
    }

    /// Fold in one reward. Returns the advantage `R - b` against the
    /// pre-update baseline; the very first observation sets `b = R` and
    /// yields advantage 0.
    pub fn observe(&mut self, reward: f64) -> Result<f64, RewardError> {
        if !reward.is_finite() {
            return Err(RewardError::NonFiniteReward);
        }
        if !self.initialized {
            self.value = reward;
            self.initialized = true;
            return Ok(0.0);
        }
        let advantage = reward - self.value;
        self.value = self.decay * self.value + (1.0 - self.decay) * reward;
        Ok(advantage)
    }
}

/// Reward for the language task: `c / ppl` where `ppl = exp(mean loss)`.
pub fn perplexity_reward(mean_loss_per_token: f64, c: f64) -> Result<f64, RewardError> {
    if !mean_loss_per_token.is_finite() {
        return Err(RewardError::NonFiniteLoss);
    }
    if c <= 0.0 {
        return Err(RewardError::BadConstant);
    }
    Ok(c / mean_loss_per_token.exp())
}

/// Fraction of correct predictions over a minibatch.
pub fn accuracy_reward(predictions: &[usize], labels: &[usize]) -> Result<f64, RewardError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(RewardError::EmptyMinibatch);
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Deterministic synthetic reward landscape over a fully enumerated space,
/// with one planted optimum that strictly maximizes the noiseless reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularOracle {
    pub template: CellTemplate,
    /// Encoded sample -> base reward in [0,1].
    pub rewards: BTreeMap<String, f64>,
    pub noise: f64,
    pub optimum: String,
}

impl TabularOracle {
    /// Build an oracle over every architecture of `template`. Non-optimal
    /// rewards are drawn uniformly from [0.2, 0.8]; the planted optimum gets
    /// 1.0.
    pub fn planted<R: Rng>(
        template: CellTemplate,
        noise: f64,
        rng: &mut R,
    ) -> Result<TabularOracle, RewardError> {
        let samples = template.enumerate_samples(1_000_000)?;
        let optimum_index = rng.gen_range(0..samples.len());
        let mut rewards = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let r = if i == optimum_index {
                1.0
            } else {
                rng.gen_range(0.2..0.8)
            };
            rewards.insert(s.encode(), r);
        }
        Ok(TabularOracle {
            template,
            rewards,
            noise,
            optimum: samples[optimum_index].encode(),
        })
    }

    /// Build from explicit per-sample rewards (keys are encoded samples).
    pub fn from_table(
        template: CellTemplate,
        rewards: BTreeMap<String, f64>,
        noise: f64,
    ) -> Result<TabularOracle, RewardError> {
        let optimum = rewards
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
            .ok_or_else(|| RewardError::BadTable("empty table".into()))?;
        Ok(TabularOracle {
            template,
            rewards,
            noise,
            optimum,
        })
    }

    pub fn optimum_sample(&self) -> ArchitectureSample {
        ArchitectureSample::decode(&self.optimum).expect("stored optimum decodes")
    }

    /// Base reward plus seeded noise, clamped to [0, 1].
    pub fn reward<R: Rng>(
        &self,
        sample: &ArchitectureSample,
        rng: &mut R,
    ) -> Result<f64, RewardError> {
        let report = self.template.validate(sample);
        if !report.is_valid() {
            return Err(RewardError::TemplateMismatch(report.violations));
        }
        let base = *self
            .rewards
            .get(&sample.encode())
            .ok_or_else(|| RewardError::BadTable(format!("missing entry {}", sample.encode())))?;
        let r = if self.noise > 0.0 {
            base + rng.gen_range(-self.noise..self.noise)
        } else {
            base
        };
        Ok(r.clamp(0.0, 1.0))
    }

    /// Plain-text table: header with the template, then one
    /// `encoded_sample<TAB>reward` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# tabular-oracle v1\n");
        out.push_str(&format!("# noise {}\n", self.noise));
        out.push_str(&format!("# optimum {}\n", self.optimum));
        for line in self.template.to_toml().lines() {
            out.push_str(&format!("#t {line}\n"));
        }
        for (key, reward) in &self.rewards {
            out.push_str(&format!("{key}\t{reward}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TabularOracle, RewardError> {
        let mut noise = 0.0;
        let mut optimum = None;
        let mut template_lines = Vec::new();
        let mut rewards = BTreeMap::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("#t ") {
                template_lines.push(rest);
            } else if let Some(rest) = line.strip_prefix("# noise ") {
                noise = rest
                    .parse()
                    .map_err(|_| RewardError::BadTable(line.to_string()))?;
            } else if let Some(rest) = line.strip_prefix("# optimum ") {
                optimum = Some(rest.to_string());
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else {
                let (key, val) = line
                    .split_once('\t')
                    .ok_or_else(|| RewardError::BadTable(line.to_string()))?;
                let reward: f64 = val
                    .parse()
                    .map_err(|_| RewardError::BadTable(line.to_string()))?;
                rewards.insert(key.to_string(), reward);
            }
        }
        let template = CellTemplate::from_toml(&template_lines.join("\n"))?;
        let optimum = optimum.ok_or_else(|| RewardError::BadTable("missing optimum".into()))?;
        Ok(TabularOracle {
            template,
            rewards,
            noise,
            optimum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{CellKind, OperationKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_template() -> CellTemplate {
        CellTemplate::conv(
            CellKind::ConvNormal,
            3,
            OperationKind::conv_set().into_iter().take(2).collect(),
        )
        .unwrap()
    }

    #[test]
    fn baseline_first_observation() {
        let mut b = Baseline::new(0.95);
        assert_eq!(b.value(), None);
        let adv = b.observe(0.5).unwrap();
        assert_eq!(adv, 0.0);
        assert_eq!(b.value(), Some(0.5));
    }

    #[test]
    fn baseline_update_formula() {
        let mut b = Baseline::new(0.95);
        b.observe(0.0).unwrap();
        let adv = b.observe(1.0).unwrap();
        assert!((adv - 1.0).abs() < 1e-12);
        assert!((b.value().unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn constant_stream_advantage_decays_geometrically() {
        let mut b = Baseline::new(0.9);
        b.observe(0.3).unwrap();
        b.observe(0.7).unwrap();
        // From here the gap to 0.7 shrinks by the decay factor each step.
        let mut prev = (0.7 - b.value().unwrap()).abs();
        for _ in 0..60 {
            let adv = b.observe(0.7).unwrap();
            assert!((adv - prev).abs() < 1e-9 * prev.max(1e-12));
            prev *= 0.9;
        }
        assert!(prev < 1e-2);
    }

    #[test]
    fn baseline_stays_within_observed_range() {
        let mut b = Baseline::new(0.95);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let r: f64 = rng.gen_range(0.1..0.9);
            lo = lo.min(r);
            hi = hi.max(r);
            b.observe(r).unwrap();
            let v = b.value().unwrap();
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn advantage_centers_on_iid_stream() {
        let mut b = Baseline::new(0.95);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            sum += b.observe(rng.gen_range(0.0..1.0)).unwrap();
        }
        assert!((sum / n as f64).abs() < 0.01);
    }

    #[test]
    fn baseline_rejects_non_finite() {
        let mut b = Baseline::new(0.95);
        assert!(b.observe(f64::NAN).is_err());
    }

    #[test]
    fn perplexity_reward_closed_forms() {
        assert!((perplexity_reward(0.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((perplexity_reward(100f64.ln(), 80.0).unwrap() - 0.8).abs() < 1e-12);
        assert!(perplexity_reward(f64::INFINITY, 1.0).is_err());
        assert!(perplexity_reward(1.0, 0.0).is_err());
    }

    #[test]
    fn perplexity_reward_monotone_in_loss() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut losses: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..10.0)).collect();
        losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rewards: Vec<f64> = losses
            .iter()
            .map(|&l| perplexity_reward(l, 5.0).unwrap())
            .collect();
        for pair in rewards.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn accuracy_reward_bounds() {
        assert_eq!(accuracy_reward(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy_reward(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert!(accuracy_reward(&[], &[]).is_err());
    }

    #[test]
    fn planted_optimum_is_strict_max() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let oracle = TabularOracle::planted(tiny_template(), 0.0, &mut rng).unwrap();
        let best = &oracle.optimum;
        for (key, r) in &oracle.rewards {
            if key != best {
                assert!(*r < oracle.rewards[best]);
            }
        }
        let optimum = oracle.optimum_sample();
        let mut noise_rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(oracle.reward(&optimum, &mut noise_rng).unwrap(), 1.0);
    }

    #[test]
    fn reward_deterministic_for_same_seed() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let oracle = TabularOracle::planted(tiny_template(), 0.1, &mut rng).unwrap();
        let sample = oracle.optimum_sample();
        let a = oracle
            .reward(&sample, &mut ChaCha20Rng::seed_from_u64(5))
            .unwrap();
        let b = oracle
            .reward(&sample, &mut ChaCha20Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_reward_under_uniform_sampling_matches_table_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let oracle = TabularOracle::planted(tiny_template(), 0.0, &mut rng).unwrap();
        let table_mean: f64 =
            oracle.rewards.values().sum::<f64>() / oracle.rewards.len() as f64;
        let samples = oracle.template.enumerate_samples(100).unwrap();
        let exhaustive_mean: f64 = samples
            .iter()
            .map(|s| oracle.reward(s, &mut rng).unwrap())
            .sum::<f64>()
            / samples.len() as f64;
        assert!((table_mean - exhaustive_mean).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_foreign_sample() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let oracle = TabularOracle::planted(tiny_template(), 0.0, &mut rng).unwrap();
        let other = CellTemplate::conv(CellKind::ConvNormal, 4, OperationKind::conv_set())
            .unwrap()
            .enumerate_samples(1_000_000)
            .unwrap()
            .pop()
            .unwrap();
        assert!(oracle.reward(&other, &mut rng).is_err());
    }

    #[test]
    fn oracle_text_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let oracle = TabularOracle::planted(tiny_template(), 0.05, &mut rng).unwrap();
        let text = oracle.to_text();
        let parsed = TabularOracle::from_text(&text).unwrap();
        assert_eq!(parsed.optimum, oracle.optimum);
        assert_eq!(parsed.noise, oracle.noise);
        assert_eq!(parsed.rewards, oracle.rewards);
        assert_eq!(parsed.template, oracle.template);
    }
}
