//! Flat run configuration read from TOML.

use std::path::{Path, PathBuf};

use arel::attention::{AgentAttentionMode, ModelConfig};
use arel::credit::Regularizer;
use arel::envs::{EnvSpec, Task};
use arel::learner::{ExperimentConfig, Strategy};
use arel::redistribution::CreditConfig;
use arel::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // environment
    pub task: Task,
    pub n_agents: usize,
    pub grid: usize,
    pub horizon: usize,
    pub obs_radius: Option<usize>,
    pub fixed_layout: bool,
    // redistribution
    pub strategy: Strategy,
    pub alpha: f64,
    pub omega: f64,
    pub regularizer: Regularizer,
    pub update_every: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub capacity: usize,
    pub credit_lr: f64,
    // credit model
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub ff_mult: usize,
    pub agent_attention: AgentAttentionMode,
    // policy learner
    pub policy_lr: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub baseline_rate: f64,
    pub shared_policy: bool,
    // schedule
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        let (env, credit, model) = (exp.env, exp.credit, exp.model);
        RunConfig {
            task: env.task,
            n_agents: env.n_agents,
            grid: env.grid,
            horizon: env.horizon,
            obs_radius: env.obs_radius,
            fixed_layout: env.fixed_layout,
            strategy: Strategy::Arel,
            alpha: credit.alpha,
            omega: credit.omega,
            regularizer: credit.regularizer,
            update_every: credit.update_every,
            batches: credit.batches,
            batch_size: credit.batch_size,
            capacity: credit.capacity,
            credit_lr: credit.lr,
            depth: model.depth,
            heads: model.heads,
            embed_dim: model.embed_dim,
            head_hidden: model.head_hidden,
            ff_mult: model.ff_mult,
            agent_attention: model.agent_attention,
            policy_lr: exp.policy_lr,
            epsilon: exp.epsilon,
            gamma: exp.gamma,
            baseline_rate: exp.baseline_rate,
            shared_policy: exp.shared_policy,
            seeds: vec![0, 1, 2, 3, 4],
            episodes: exp.episodes,
            eval_every: exp.eval_every,
            eval_episodes: exp.eval_episodes,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn env_spec(&self) -> EnvSpec {
        let base = match self.task {
            Task::Navigation => EnvSpec::navigation(self.n_agents),
            Task::TwoButton => EnvSpec { n_agents: self.n_agents, ..EnvSpec::two_button() },
        };
        EnvSpec {
            grid: self.grid,
            horizon: self.horizon,
            obs_radius: self.obs_radius,
            fixed_layout: self.fixed_layout,
            ..base
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            env: self.env_spec(),
            episodes: self.episodes,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            policy_lr: self.policy_lr,
            epsilon: self.epsilon,
            gamma: self.gamma,
            baseline_rate: self.baseline_rate,
            shared_policy: self.shared_policy,
            credit: CreditConfig {
                update_every: self.update_every,
                batches: self.batches,
                batch_size: self.batch_size,
                capacity: self.capacity,
                omega: self.omega,
                regularizer: self.regularizer,
                lr: self.credit_lr,
                alpha: self.alpha,
            },
            model: ModelConfig {
                embed_dim: self.embed_dim,
                heads: self.heads,
                depth: self.depth,
                agent_attention: self.agent_attention,
                ff_mult: self.ff_mult,
                head_hidden: self.head_hidden,
                ..ModelConfig::default()
            },
        }
    }

    /// Field-level checks first so messages name the offending key, then the
    /// library's own validation of the assembled experiment.
    pub fn validate(&self) -> Result<(), Error> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return field("alpha", "must lie in [0, 1]");
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return field("omega", "must be a finite value ≥ 0");
        }
        if self.depth < 1 {
            return field("depth", "must be at least 1");
        }
        if self.seeds.is_empty() {
            return field("seeds", "must list at least one seed");
        }
        self.experiment().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("omega = 1.0\nomgea = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("omgea"), "{err}");
    }

    #[test]
    fn field_errors_name_the_field() {
        for (text, name) in [("alpha = 1.5", "alpha"), ("omega = -1.0", "omega"), ("depth = 0", "depth"), ("seeds = []", "seeds")] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            assert!(err.to_string().contains(name), "{err}");
        }
    }

    #[test]
    fn enums_parse_from_snake_case() {
        let cfg = RunConfig::from_toml("task = \"navigation\"\nn_agents = 3\nstrategy = \"final\"\nregularizer = \"l1\"\nagent_attention = \"uniform\"\n").unwrap();
        assert_eq!(cfg.strategy, Strategy::Final);
        assert_eq!(cfg.env_spec().n_landmarks(), 3);
        assert_eq!(cfg.experiment().model.agent_attention, AgentAttentionMode::Uniform);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { omega: 1.0, ..RunConfig::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
