//! Trajectory storage, batch sampling, credit-network training and reward
//! mixing for the policy learner.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{total_loss_on_tape, LossTargets, Regularizer};
use crate::error::{Error, Result};
use crate::model::CreditModel;
use crate::ndtensor::{Adam, Tape, Tensor};

/// Version tag written on every line of a buffer dump.
pub const BUFFER_SCHEMA_VERSION: u32 = 1;

/// One finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub seed: u64,
    pub n_agents: usize,
    pub obs_dim: usize,
    /// Row-major `[T, N, obs_dim]`.
    pub observations: Vec<f64>,
    /// `actions[t][i]`.
    pub actions: Vec<Vec<usize>>,
    pub episodic_reward: f64,
    /// Ground-truth per-step rewards, for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let bad = |m: String| Err(Error::Validation(format!("episode {}: {m}", self.episode_id)));
        if t == 0 || self.n_agents == 0 || self.obs_dim == 0 {
            return bad("empty episode, agent set or observation".into());
        }
        if self.observations.len() != t * self.n_agents * self.obs_dim {
            return bad(format!(
                "{} observation values for T={t}, N={}, obs_dim={}",
                self.observations.len(),
                self.n_agents,
                self.obs_dim
            ));
        }
        if let Some(step) = self.actions.iter().position(|a| a.len() != self.n_agents) {
            return bad(format!("step {step} has {} actions", self.actions[step].len()));
        }
        if !self.episodic_reward.is_finite() || self.observations.iter().any(|v| !v.is_finite()) {
            return bad("non-finite reward or observation".into());
        }
        if let Some(h) = &self.hidden_rewards {
            if h.len() != t {
                return bad(format!("{} hidden rewards for T={t}", h.len()));
            }
            let sum: f64 = h.iter().sum();
            if (sum - self.episodic_reward).abs() > 1e-9 * (1.0 + sum.abs()) {
                return bad(format!("episodic reward {} differs from hidden sum {sum}", self.episodic_reward));
            }
        }
        Ok(())
    }

    /// Observations as a `[T, N, obs_dim]` tensor.
    pub fn obs_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.n_agents, self.obs_dim], self.observations.clone())
    }

    /// Credit-model input per agent and step: the observation, followed by
    /// a one-hot action over `action_classes` when given. Returns the
    /// row-major `[T, N, width]` values and the width.
    pub fn features(&self, action_classes: Option<usize>) -> Result<(Vec<f64>, usize)> {
        let Some(k) = action_classes else { return Ok((self.observations.clone(), self.obs_dim)) };
        let width = self.obs_dim + k;
        let mut out = Vec::with_capacity(self.len() * self.n_agents * width);
        for (t, acts) in self.actions.iter().enumerate() {
            for (i, &a) in acts.iter().enumerate() {
                if a >= k {
                    return Err(Error::Validation(format!("action {a} outside 0..{k} at t={t}")));
                }
                let base = (t * self.n_agents + i) * self.obs_dim;
                out.extend_from_slice(&self.observations[base..base + self.obs_dim]);
                out.extend((0..k).map(|b| if b == a { 1.0 } else { 0.0 }));
            }
        }
        Ok((out, width))
    }
}

/// Bounded FIFO of trajectories.
#[derive(Debug, Clone)]
pub struct ExperienceBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
}

impl ExperienceBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(ExperienceBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.items.get(i)
    }

    pub fn store(&mut self, trajectory: Trajectory) -> Result<()> {
        trajectory.validate()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(trajectory);
        Ok(())
    }

    /// `b` uniform draws with replacement, as buffer indices.
    pub fn sample_indices<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Contract("cannot sample from an empty buffer".into()));
        }
        Ok((0..b).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<&Trajectory>> {
        Ok(self.sample_indices(b, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    /// One JSON object per line, each tagged with the schema version.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| {
            for t in &self.items {
                serde_json::to_writer(&mut *w, &Record { schema_version: BUFFER_SCHEMA_VERSION, episode: t.clone() })?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }

    pub fn load_jsonl(path: &Path, capacity: usize) -> Result<Self> {
        let mut buf = Self::new(capacity)?;
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.schema_version != BUFFER_SCHEMA_VERSION {
                return Err(Error::Format(format!(
                    "{}:{}: schema version {} (expected {BUFFER_SCHEMA_VERSION})",
                    path.display(),
                    i + 1,
                    rec.schema_version
                )));
            }
            buf.store(rec.episode)?;
        }
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema_version: u32,
    episode: Trajectory,
}

/// A zero-padded batch ready for the credit model.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    /// `[B, T_max, N, obs_dim]`.
    pub obs: Tensor,
    pub lengths: Vec<usize>,
    pub episodic: Vec<f64>,
}

impl EpisodeBatch {
    /// Pads every episode to the longest one. Padding sits after the real
    /// steps, so the causal temporal mask already hides it from them.
    pub fn new(episodes: &[&Trajectory]) -> Result<Self> {
        Self::with_features(episodes, None)
    }

    /// Like [`EpisodeBatch::new`], with one-hot actions appended to each
    /// observation when `action_classes` is set.
    pub fn with_features(episodes: &[&Trajectory], action_classes: Option<usize>) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::Contract("empty episode batch".into()))?;
        let (n, d0) = (first.n_agents, first.obs_dim);
        if let Some(e) = episodes.iter().find(|e| e.n_agents != n || e.obs_dim != d0) {
            return Err(Error::Dimension(format!(
                "episode {} has N={}, obs_dim={}; batch expects N={n}, obs_dim={d0}",
                e.episode_id, e.n_agents, e.obs_dim
            )));
        }
        let d = d0 + action_classes.unwrap_or(0);
        let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let step = n * d;
        let mut obs = vec![0.0; episodes.len() * t_max * step];
        for (b, e) in episodes.iter().enumerate() {
            let base = b * t_max * step;
            let (feats, _) = e.features(action_classes)?;
            obs[base..base + feats.len()].copy_from_slice(&feats);
        }
        Ok(EpisodeBatch {
            obs: Tensor::new(vec![episodes.len(), t_max, n, d], obs)?,
            lengths: episodes.iter().map(|e| e.len()).collect(),
            episodic: episodes.iter().map(|e| e.episodic_reward).collect(),
        })
    }

    pub fn t_max(&self) -> usize {
        self.obs.shape()[1]
    }
}

/// Loss values of one credit-network step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub total: f64,
    pub regression: f64,
    pub regularizer: f64,
}

/// Credit-learning cadence and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CreditConfig {
    /// Episodes between credit updates (M).
    pub update_every: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub capacity: usize,
    pub omega: f64,
    pub regularizer: Regularizer,
    pub lr: f64,
    /// Weight of the predicted rewards in the mixed signal.
    pub alpha: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        CreditConfig {
            update_every: 50,
            batches: 100,
            batch_size: 32,
            capacity: 5000,
            omega: 20.0,
            regularizer: Regularizer::Variance,
            lr: 1e-4,
            alpha: 1.0,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<()> {
        crate::credit::check_omega(self.omega)?;
        check_alpha(self.alpha)?;
        if self.update_every == 0 || self.batches == 0 || self.batch_size == 0 || self.capacity == 0 {
            return Err(Error::Config("update_every, batches, batch_size and capacity must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// True when the credit network trains after `episode_count` episodes.
    pub fn should_update(&self, episode_count: usize) -> bool {
        episode_count > 0 && episode_count % self.update_every == 0
    }
}

/// Credit model plus its optimizer.
pub struct CreditTrainer {
    pub model: CreditModel,
    adam: Adam,
    pub omega: f64,
    pub regularizer: Regularizer,
    /// Append one-hot actions over this many classes to the inputs.
    pub action_classes: Option<usize>,
    steps: usize,
}

impl CreditTrainer {
    pub fn new(model: CreditModel, lr: f64, omega: f64, regularizer: Regularizer) -> Result<Self> {
        crate::credit::check_omega(omega)?;
        let adam = Adam::new(&model.params, lr);
        Ok(CreditTrainer { model, adam, omega, regularizer, action_classes: None, steps: 0 })
    }

    pub fn with_actions(mut self, classes: usize) -> Self {
        self.action_classes = Some(classes);
        self
    }

    /// Batch of the given episodes in this trainer's input layout.
    pub fn batch(&self, episodes: &[&Trajectory]) -> Result<EpisodeBatch> {
        EpisodeBatch::with_features(episodes, self.action_classes)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Batch losses under the current parameters, without an update.
    pub fn evaluate(&self, batch: &EpisodeBatch) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let terms = self.record(&mut tape, batch)?;
        Ok(read_terms(&tape, &terms))
    }

    /// One Adam step on `batch`.
    pub fn train_step(&mut self, batch: &EpisodeBatch) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let terms = self.record(&mut tape, batch)?;
        let rec = read_terms(&tape, &terms);
        if ![rec.total, rec.regression, rec.regularizer].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite credit loss at step {}: total={}, l_r={}, l_reg={}, batch of {} episodes",
                self.steps,
                rec.total,
                rec.regression,
                rec.regularizer,
                batch.lengths.len()
            )));
        }
        self.model.params.zero_grad();
        tape.backward_into(terms.total, &mut self.model.params)?;
        let norm = self.model.params.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at credit step {}", self.steps)));
        }
        self.adam.step(&mut self.model.params)?;
        self.steps += 1;
        Ok(rec)
    }

    /// `batches` steps on batches drawn from `buffer`; returns the loss trace.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        buffer: &ExperienceBuffer,
        batches: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<LossRecord>> {
        let mut trace = Vec::with_capacity(batches);
        for _ in 0..batches {
            let batch = self.batch(&buffer.sample_batch(batch_size, rng)?)?;
            trace.push(self.train_step(&batch)?);
        }
        Ok(trace)
    }

    /// Predicted per-step rewards for one trajectory under the current
    /// parameters.
    pub fn predict(&self, trajectory: &Trajectory) -> Result<Vec<f64>> {
        let (feats, width) = trajectory.features(self.action_classes)?;
        let x = Tensor::new(vec![1, trajectory.len(), trajectory.n_agents, width], feats)?;
        Ok(self.model.predict_tensor(&x, None)?.into_data())
    }

    fn record(&self, tape: &mut Tape, batch: &EpisodeBatch) -> Result<crate::credit::LossTerms> {
        let obs = tape.constant(batch.obs.clone());
        let r_hat = self.model.forward(tape, obs, None, None)?;
        let targets = LossTargets::new(&batch.episodic, &batch.lengths, batch.t_max())?;
        total_loss_on_tape(tape, r_hat, &targets, self.regularizer, self.omega)
    }
}

fn read_terms(tape: &Tape, t: &crate::credit::LossTerms) -> LossRecord {
    let v = |x| tape.value(x).data()[0];
    LossRecord { total: v(t.total), regression: v(t.regression), regularizer: v(t.regularizer) }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `α·r̂_t`, with `(1−α)·R_T` added at the final step.
pub fn mix_rewards(r_hat: &[f64], episodic_reward: f64, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if r_hat.is_empty() {
        return Err(Error::Dimension("cannot mix an empty reward sequence".into()));
    }
    let mut out: Vec<f64> = r_hat.iter().map(|r| alpha * r).collect();
    *out.last_mut().unwrap() += (1.0 - alpha) * episodic_reward;
    Ok(out)
}
