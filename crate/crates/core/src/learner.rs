//! Independent REINFORCE learners with tabular softmax policies, fed by one
//! of three dense-reward strategies, and the seeded experiment loop that
//! compares them.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ModelConfig;
use crate::envs::{Env, EnvSpec, Task, N_ACTIONS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::CreditModel;
use crate::redistribution::{mix_rewards, CreditConfig, CreditTrainer, ExperienceBuffer, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Rewards predicted by the credit model, mixed with the episodic sum.
    Arel,
    /// `R_T / T` at every step.
    Uniform,
    /// The raw episodic signal: zero, then `R_T` at the last step.
    Final,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Arel, Strategy::Uniform, Strategy::Final];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Arel => "arel",
            Strategy::Uniform => "uniform",
            Strategy::Final => "final",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected arel, uniform or final")))
    }
}

/// Discretized observation used as a table key.
pub type ObsKey = Vec<i64>;

fn key_of(obs: &[f64], agent: Option<usize>) -> ObsKey {
    let mut k: ObsKey = obs.iter().map(|v| v.round() as i64).collect();
    if let Some(i) = agent {
        k.push(i as i64);
    }
    k
}

fn softmax(prefs: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let max = prefs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = prefs.map(|v| (v - max).exp());
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Softmax over per-observation action preferences. With `shared`, every
/// agent reads and writes the same table.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "PolicyFile", into = "PolicyFile")]
pub struct TabularPolicy {
    pub shared: bool,
    prefs: HashMap<ObsKey, [f64; N_ACTIONS]>,
}

/// Serialized form: JSON objects need string keys, so entries are listed.
#[derive(Serialize, Deserialize)]
struct PolicyFile {
    shared: bool,
    entries: Vec<(ObsKey, [f64; N_ACTIONS])>,
}

impl From<PolicyFile> for TabularPolicy {
    fn from(f: PolicyFile) -> Self {
        TabularPolicy { shared: f.shared, prefs: f.entries.into_iter().collect() }
    }
}

impl From<TabularPolicy> for PolicyFile {
    fn from(p: TabularPolicy) -> Self {
        let mut entries: Vec<_> = p.prefs.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        PolicyFile { shared: p.shared, entries }
    }
}

impl TabularPolicy {
    pub fn new(shared: bool) -> Self {
        TabularPolicy { shared, prefs: HashMap::new() }
    }

    pub fn key(&self, obs: &[f64], agent: usize) -> ObsKey {
        key_of(obs, (!self.shared).then_some(agent))
    }

    pub fn states(&self) -> usize {
        self.prefs.len()
    }

    pub fn preferences(&self, key: &ObsKey) -> [f64; N_ACTIONS] {
        self.prefs.get(key).copied().unwrap_or([0.0; N_ACTIONS])
    }

    pub fn probs(&self, key: &ObsKey) -> [f64; N_ACTIONS] {
        softmax(&self.preferences(key))
    }

    /// Mixture `(1−ε)·π + ε·uniform`.
    pub fn behavior_probs(&self, key: &ObsKey, epsilon: f64) -> [f64; N_ACTIONS] {
        self.probs(key).map(|p| (1.0 - epsilon) * p + epsilon / N_ACTIONS as f64)
    }

    pub fn sample<R: Rng + ?Sized>(&self, key: &ObsKey, epsilon: f64, rng: &mut R) -> usize {
        let p = self.behavior_probs(key, epsilon);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return a;
            }
        }
        N_ACTIONS - 1
    }

    /// Most preferred action; ties are broken uniformly at random.
    pub fn greedy<R: Rng + ?Sized>(&self, key: &ObsKey, rng: &mut R) -> usize {
        let p = self.preferences(key);
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best: Vec<usize> = (0..N_ACTIONS).filter(|&a| p[a] == max).collect();
        best[rng.random_range(0..best.len())]
    }

    /// `Σ_t Σ_i log π(a_{t,i} | o_{t,i}) · w_t`.
    pub fn surrogate(&self, steps: &[Vec<(ObsKey, usize)>], weights: &[f64]) -> f64 {
        steps
            .iter()
            .zip(weights)
            .map(|(agents, w)| agents.iter().map(|(k, a)| self.probs(k)[*a].ln() * w).sum::<f64>())
            .sum()
    }

    /// Gradient of [`Self::surrogate`] with respect to the preferences.
    pub fn surrogate_grad(&self, steps: &[Vec<(ObsKey, usize)>], weights: &[f64]) -> HashMap<ObsKey, [f64; N_ACTIONS]> {
        let mut g: HashMap<ObsKey, [f64; N_ACTIONS]> = HashMap::new();
        for (agents, w) in steps.iter().zip(weights) {
            for (k, a) in agents {
                let p = self.probs(k);
                let slot = g.entry(k.clone()).or_insert([0.0; N_ACTIONS]);
                for b in 0..N_ACTIONS {
                    slot[b] += w * (f64::from(u8::from(b == *a)) - p[b]);
                }
            }
        }
        g
    }

    pub fn apply(&mut self, grad: &HashMap<ObsKey, [f64; N_ACTIONS]>, lr: f64) {
        for (k, g) in grad {
            let slot = self.prefs.entry(k.clone()).or_insert([0.0; N_ACTIONS]);
            for b in 0..N_ACTIONS {
                slot[b] += lr * g[b];
            }
        }
    }

    pub fn set_preferences(&mut self, key: ObsKey, prefs: [f64; N_ACTIONS]) {
        self.prefs.insert(key, prefs);
    }
}

/// `G_t = Σ_{s≥t} γ^{s−t} r_s`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Running mean of the return at each time index.
#[derive(Debug, Clone, Default)]
pub struct Baseline {
    rate: f64,
    values: Vec<f64>,
    seen: Vec<bool>,
}

impl Baseline {
    pub fn new(rate: f64) -> Self {
        Baseline { rate, values: Vec::new(), seen: Vec::new() }
    }

    pub fn get(&self, t: usize) -> f64 {
        self.values.get(t).copied().unwrap_or(0.0)
    }

    pub fn observe(&mut self, returns: &[f64]) {
        if self.values.len() < returns.len() {
            self.values.resize(returns.len(), 0.0);
            self.seen.resize(returns.len(), false);
        }
        for (t, &g) in returns.iter().enumerate() {
            if self.seen[t] {
                self.values[t] += self.rate * (g - self.values[t]);
            } else {
                self.values[t] = g;
                self.seen[t] = true;
            }
        }
    }
}

/// Per-step table keys and actions of a trajectory.
fn steps_of(policy: &TabularPolicy, traj: &Trajectory) -> Vec<Vec<(ObsKey, usize)>> {
    let (n, d) = (traj.n_agents, traj.obs_dim);
    (0..traj.len())
        .map(|t| {
            (0..n)
                .map(|i| {
                    let o = &traj.observations[(t * n + i) * d..(t * n + i + 1) * d];
                    (policy.key(o, i), traj.actions[t][i])
                })
                .collect()
        })
        .collect()
}

/// One score-function step on `trajectory` with rewards `dense`; returns
/// the advantages used.
pub fn policy_update(
    policy: &mut TabularPolicy,
    baseline: &mut Baseline,
    trajectory: &Trajectory,
    dense: &[f64],
    gamma: f64,
    lr: f64,
) -> Result<Vec<f64>> {
    if dense.len() != trajectory.len() {
        return Err(Error::Dimension(format!("{} dense rewards for T={}", dense.len(), trajectory.len())));
    }
    let returns = discounted_returns(dense, gamma);
    if let Some(t) = returns.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite return at t={t} of episode {} (rewards {dense:?})",
            trajectory.episode_id
        )));
    }
    let adv: Vec<f64> = returns.iter().enumerate().map(|(t, g)| g - baseline.get(t)).collect();
    baseline.observe(&returns);
    let steps = steps_of(policy, trajectory);
    let grad = policy.surrogate_grad(&steps, &adv);
    policy.apply(&grad, lr);
    Ok(adv)
}

/// A finished episode plus task-level outcome.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub success: bool,
}

fn success_of(env: &Env) -> bool {
    match env.spec().task {
        Task::TwoButton => env.door_ever_opened(),
        Task::Navigation => env.landmarks().iter().all(|l| env.agents().contains(l)),
    }
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Acting {
    /// Sample from the ε-softened policy.
    Explore(f64),
    Greedy,
}

pub fn rollout<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    spec: &EnvSpec,
    env_seed: u64,
    episode_id: u64,
    acting: Acting,
    rng: &mut R,
) -> Result<Rollout> {
    let (mut env, mut obs) = Env::reset(spec, env_seed)?;
    let (n, d) = (spec.n_agents, spec.obs_dim());
    let mut observations = Vec::with_capacity(spec.horizon * n * d);
    let mut actions = Vec::with_capacity(spec.horizon);
    let mut hidden = Vec::with_capacity(spec.horizon);
    let mut revealed = 0.0;
    while !env.done() {
        let joint: Vec<usize> = (0..n)
            .map(|i| {
                let k = policy.key(&obs[i], i);
                match acting {
                    Acting::Explore(eps) => policy.sample(&k, eps, rng),
                    Acting::Greedy => policy.greedy(&k, rng),
                }
            })
            .collect();
        observations.extend(obs.iter().flatten());
        let out = env.step(&joint)?;
        actions.push(joint);
        hidden.push(out.hidden);
        revealed = out.revealed;
        obs = out.observations;
    }
    Ok(Rollout {
        success: success_of(&env),
        trajectory: Trajectory {
            episode_id,
            seed: env_seed,
            n_agents: n,
            obs_dim: d,
            observations,
            actions,
            episodic_reward: revealed,
            hidden_rewards: Some(hidden),
        },
    })
}

/// Dense rewards handed to the policy learner.
pub fn strategy_rewards(
    strategy: Strategy,
    trajectory: &Trajectory,
    trainer: Option<&CreditTrainer>,
    alpha: f64,
) -> Result<Vec<f64>> {
    let (t, r) = (trajectory.len(), trajectory.episodic_reward);
    match strategy {
        Strategy::Final => mix_rewards(&vec![0.0; t], r, 0.0),
        Strategy::Uniform => Ok(vec![r / t as f64; t]),
        Strategy::Arel => {
            let trainer = trainer.ok_or_else(|| Error::Contract("the arel strategy needs a credit model".into()))?;
            mix_rewards(&trainer.predict(trajectory)?, r, alpha)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub policy_lr: f64,
    pub epsilon: f64,
    pub gamma: f64,
    /// Step size of the running-mean baseline.
    pub baseline_rate: f64,
    pub shared_policy: bool,
    pub credit: CreditConfig,
    /// Credit model settings; `obs_dim` and `max_len` follow the env.
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::two_button(),
            episodes: 20_000,
            eval_every: 500,
            eval_episodes: 50,
            policy_lr: 0.1,
            epsilon: 0.05,
            gamma: 1.0,
            baseline_rate: 0.01,
            shared_policy: true,
            credit: CreditConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.credit.validate()?;
        self.credit_model_config().validate()?;
        if self.episodes == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("episodes, eval_every and eval_episodes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("epsilon and gamma must lie in [0, 1]".into()));
        }
        if !(self.policy_lr > 0.0 && self.policy_lr.is_finite()) || !(0.0..=1.0).contains(&self.baseline_rate) {
            return Err(Error::Config("policy_lr must be positive and baseline_rate in [0, 1]".into()));
        }
        Ok(())
    }

    /// The credit model reads each agent's observation and one-hot action.
    pub fn credit_model_config(&self) -> ModelConfig {
        ModelConfig {
            obs_dim: self.env.obs_dim() + N_ACTIONS,
            max_len: self.model.max_len.max(self.env.horizon),
            ..self.model.clone()
        }
    }
}

/// One evaluation checkpoint of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub seed: u64,
    pub episode: usize,
    pub eval_return: f64,
    pub success_rate: f64,
}

/// Mean hidden return and success rate of greedy rollouts on fixed seeds.
pub fn evaluate(policy: &TabularPolicy, spec: &EnvSpec, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ret, mut succ) = (0.0, 0.0);
    for e in 0..episodes {
        let r = rollout(policy, spec, seed.wrapping_add(e as u64), e as u64, Acting::Greedy, &mut rng)?;
        ret += r.trajectory.hidden_rewards.as_ref().map_or(0.0, |h| h.iter().sum());
        succ += f64::from(u8::from(r.success));
    }
    Ok((ret / episodes as f64, succ / episodes as f64))
}

/// Everything one seed produced.
pub struct SeedRun {
    pub curve: Vec<CurveRecord>,
    pub policy: TabularPolicy,
    pub credit: Option<CreditTrainer>,
    pub credit_losses: Vec<f64>,
    /// Credit-training episodes still held at the end (empty without a model).
    pub buffer: ExperienceBuffer,
}

/// Trains one seed with `strategy` and records the evaluation curve.
pub fn run_seed(cfg: &ExperimentConfig, strategy: Strategy, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = TabularPolicy::new(cfg.shared_policy);
    let mut baseline = Baseline::new(cfg.baseline_rate);
    let mut trainer = match strategy {
        Strategy::Arel => {
            let model = CreditModel::new(&cfg.credit_model_config(), &mut rng)?;
            Some(CreditTrainer::new(model, cfg.credit.lr, cfg.credit.omega, cfg.credit.regularizer)?.with_actions(N_ACTIONS))
        }
        _ => None,
    };
    let mut buffer = ExperienceBuffer::new(cfg.credit.capacity)?;
    let eval_seed = seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x00e7_a15e;
    let mut curve = Vec::new();
    let mut credit_losses = Vec::new();
    for k in 1..=cfg.episodes {
        let env_seed = rng.next_u64();
        let traj = rollout(&policy, &cfg.env, env_seed, k as u64, Acting::Explore(cfg.epsilon), &mut rng)?.trajectory;
        let dense = strategy_rewards(strategy, &traj, trainer.as_ref(), cfg.credit.alpha)?;
        policy_update(&mut policy, &mut baseline, &traj, &dense, cfg.gamma, cfg.policy_lr)?;
        if let Some(tr) = trainer.as_mut() {
            buffer.store(traj)?;
            if cfg.credit.should_update(k) {
                let trace = tr.update(&buffer, cfg.credit.batches, cfg.credit.batch_size, &mut rng)?;
                credit_losses.extend(trace.iter().map(|l| l.total));
            }
        }
        if k % cfg.eval_every == 0 || k == cfg.episodes {
            let (eval_return, success_rate) = evaluate(&policy, &cfg.env, cfg.eval_episodes, eval_seed)?;
            curve.push(CurveRecord { seed, episode: k, eval_return, success_rate });
        }
    }
    Ok(SeedRun { curve, policy, credit: trainer, credit_losses, buffer })
}

/// Runs every seed (in parallel under `Exec::Parallel`) and returns the
/// per-seed curves in seed order.
pub fn run_experiment(cfg: &ExperimentConfig, strategy: Strategy, seeds: &[u64], exec: Exec) -> Result<Vec<Vec<CurveRecord>>> {
    cfg.validate()?;
    exec.map(seeds, |&s| run_seed(cfg, strategy, s).map(|r| r.curve)).into_iter().collect()
}

/// Aggregate curve row: statistics across seeds at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub episode: usize,
    pub seeds: usize,
    pub median_return: f64,
    pub mean_return: f64,
    pub median_success: f64,
    pub mean_success: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn aggregate(curves: &[Vec<CurveRecord>]) -> Vec<AggregateRecord> {
    let Some(first) = curves.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| {
            let rets: Vec<f64> = curves.iter().filter_map(|c| c.get(i)).map(|r| r.eval_return).collect();
            let succ: Vec<f64> = curves.iter().filter_map(|c| c.get(i)).map(|r| r.success_rate).collect();
            AggregateRecord {
                episode: first[i].episode,
                seeds: rets.len(),
                median_return: median(&rets),
                mean_return: rets.iter().sum::<f64>() / rets.len() as f64,
                median_success: median(&succ),
                mean_success: succ.iter().sum::<f64>() / succ.len() as f64,
            }
        })
        .collect()
}

/// Mean evaluation return over all checkpoints.
pub fn area_under_curve(curve: &[CurveRecord]) -> f64 {
    curve.iter().map(|r| r.eval_return).sum::<f64>() / curve.len().max(1) as f64
}

/// Writes `{prefix}_seed{s}.csv` per seed and `{prefix}_aggregate.csv`.
pub fn write_curves(dir: &Path, prefix: &str, curves: &[Vec<CurveRecord>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in curves {
        let Some(first) = c.first() else { continue };
        write_csv(&dir.join(format!("{prefix}_seed{}.csv", first.seed)), c)?;
    }
    write_csv(&dir.join(format!("{prefix}_aggregate.csv")), &aggregate(curves))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    crate::io::write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    })
}
