//! Credit-model training on synthetic episodes with known per-step rewards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AgentAttentionMode, ModelConfig};
use crate::credit::Regularizer;
use crate::envs::synthetic::{Interaction, SyntheticSpec, SyntheticTask};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::CreditModel;
use crate::redistribution::{CreditTrainer, EpisodeBatch, ExperienceBuffer, Trajectory};

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub task: SyntheticSpec,
    /// `obs_dim` and `max_len` are taken from the task.
    pub model: ModelConfig,
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub omega: f64,
    pub regularizer: Regularizer,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            task: SyntheticSpec { interaction: Interaction::Leader, interaction_coef: 1.0, ..SyntheticSpec::default() },
            model: ModelConfig { embed_dim: 32, heads: 4, ..ModelConfig::default() },
            train_episodes: 2000,
            test_episodes: 200,
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            omega: 20.0,
            regularizer: Regularizer::Variance,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { obs_dim: self.task.obs_dim, max_len: self.task.horizon, ..self.model.clone() }
    }

    pub fn with_agent_attention(mut self, mode: AgentAttentionMode) -> Self {
        self.model.agent_attention = mode;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub seed: u64,
    /// Held-out regression loss before and after training.
    pub initial_regression: f64,
    pub final_regression: f64,
    /// Pooled correlation of predicted and true per-step rewards on the
    /// held-out episodes.
    pub correlation: f64,
    pub loss_trace: Vec<f64>,
}

impl RecoveryReport {
    pub fn regression_ratio(&self) -> f64 {
        self.final_regression / self.initial_regression
    }
}

/// Pooled `(r̂, r)` pairs over every step of every episode.
pub fn held_out_correlation(trainer: &CreditTrainer, episodes: &[Trajectory]) -> Result<f64> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for e in episodes {
        pred.extend(trainer.predict(e)?);
        truth.extend(e.hidden_rewards.as_ref().ok_or_else(|| Error::Contract("episode lacks hidden rewards".into()))?);
    }
    Ok(pearson(&pred, &truth))
}

pub fn synthetic_recovery(cfg: &RecoveryConfig) -> Result<RecoveryReport> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let train = task.dataset(cfg.train_episodes, 0, cfg.seed.wrapping_mul(2).wrapping_add(1));
    let test = task.dataset(cfg.test_episodes, cfg.train_episodes as u64, cfg.seed.wrapping_mul(2).wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = CreditModel::new(&cfg.model_config(), &mut rng)?;
    let mut trainer = CreditTrainer::new(model, cfg.lr, cfg.omega, cfg.regularizer)?;
    let mut buffer = ExperienceBuffer::new(train.len().max(1))?;
    for e in train {
        buffer.store(e)?;
    }
    let refs: Vec<&Trajectory> = test.iter().collect();
    let test_batch: EpisodeBatch = trainer.batch(&refs)?;
    let initial_regression = trainer.evaluate(&test_batch)?.regression;
    let trace = trainer.update(&buffer, cfg.steps, cfg.batch_size, &mut rng)?;
    let final_regression = trainer.evaluate(&test_batch)?.regression;
    Ok(RecoveryReport {
        seed: cfg.seed,
        initial_regression,
        final_regression,
        correlation: held_out_correlation(&trainer, &test)?,
        loss_trace: trace.iter().map(|l| l.total).collect(),
    })
}

/// Same configuration over several seeds.
pub fn recovery_over_seeds(cfg: &RecoveryConfig, seeds: &[u64], exec: Exec) -> Result<Vec<RecoveryReport>> {
    exec.map(seeds, |&seed| synthetic_recovery(&RecoveryConfig { seed, ..cfg.clone() })).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_nan());
    }

    #[test]
    fn short_run_reduces_regression_loss() {
        let cfg = RecoveryConfig {
            model: ModelConfig { embed_dim: 8, heads: 2, head_hidden: 16, ff_mult: 2, ..ModelConfig::default() },
            train_episodes: 200,
            test_episodes: 50,
            steps: 150,
            lr: 1e-3,
            omega: 0.0,
            ..RecoveryConfig::default()
        };
        let r = synthetic_recovery(&cfg).unwrap();
        assert!(r.final_regression < r.initial_regression, "{r:?}");
        assert_eq!(r.loss_trace.len(), 150);
    }

    #[test]
    fn uniform_agent_attention_trains() {
        let cfg = RecoveryConfig {
            model: ModelConfig { embed_dim: 8, heads: 2, head_hidden: 8, ff_mult: 1, ..ModelConfig::default() },
            train_episodes: 20,
            test_episodes: 5,
            steps: 3,
            ..RecoveryConfig::default()
        }
        .with_agent_attention(AgentAttentionMode::Uniform);
        let model = CreditModel::new(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(model.params.find("block0.agent.w_query").is_none());
        assert!(model.params.find("block0.temporal.w_query").is_some());
        synthetic_recovery(&cfg).unwrap();
    }
}
