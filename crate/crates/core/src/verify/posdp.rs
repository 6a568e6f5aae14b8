//! Exactly enumerable decision processes with trajectory-level rewards.
//!
//! A trajectory is `(s₀, j₀, s₁, j₁, …, s_{T−1}, j_{T−1}, s_T)` with `j` the
//! joint action index `Σᵢ aᵢ·A^i`. Rewards are stored per step over whole
//! trajectories, so a step reward may depend on the entire path.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Largest number of trajectories (or policy-trajectory pairs) enumerated.
pub const PATH_BUDGET: usize = 1_000_000;
const POLICY_WORK_BUDGET: usize = 100_000_000;
const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DecPosdpSpec {
    pub n_states: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub n_obs: usize,
    /// `observation[i][s]`: what agent `i` sees in state `s`.
    pub observation: Vec<Vec<usize>>,
    pub initial: Vec<f64>,
    /// Row `s·J + j` is the next-state distribution.
    pub transition: Vec<Vec<f64>>,
    /// `step_rewards[t][path]`; the return of a path is the sum over `t`.
    pub step_rewards: Vec<Vec<f64>>,
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    (0..exp).try_fold(1usize, |acc, _| acc.checked_mul(base))
}

impl DecPosdpSpec {
    pub fn joint_actions(&self) -> usize {
        checked_pow(self.n_actions, self.n_agents).unwrap_or(usize::MAX)
    }

    /// Number of distinct trajectories, or `None` on overflow.
    pub fn path_count(&self) -> Option<usize> {
        checked_pow(self.n_states, self.horizon + 1)?.checked_mul(checked_pow(self.joint_actions(), self.horizon)?)
    }

    fn checked_path_count(&self) -> Result<usize> {
        match self.path_count() {
            Some(p) if p <= PATH_BUDGET => Ok(p),
            p => Err(Error::Size(format!(
                "{} trajectories exceed the enumeration budget of {PATH_BUDGET}",
                p.map_or("more than usize::MAX".to_string(), |p| p.to_string())
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_states == 0 || self.n_agents == 0 || self.n_actions == 0 || self.horizon == 0 || self.n_obs == 0 {
            return bad("decision process needs positive sizes".into());
        }
        let paths = self.checked_path_count()?;
        let j = self.joint_actions();
        if self.observation.len() != self.n_agents
            || self.observation.iter().any(|o| o.len() != self.n_states || o.iter().any(|&x| x >= self.n_obs))
        {
            return bad("observation map must give each agent one symbol per state".into());
        }
        let is_dist = |d: &[f64]| {
            d.len() == self.n_states && d.iter().all(|p| p.is_finite() && *p >= 0.0) && (d.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL
        };
        if !is_dist(&self.initial) {
            return bad("initial distribution must sum to 1".into());
        }
        if self.transition.len() != self.n_states * j || !self.transition.iter().all(|row| is_dist(row)) {
            return bad("every transition row must be a distribution over states".into());
        }
        if self.step_rewards.len() != self.horizon
            || self.step_rewards.iter().any(|r| r.len() != paths || r.iter().any(|x| !x.is_finite()))
        {
            return bad("step rewards must be finite and cover every trajectory at every step".into());
        }
        Ok(())
    }

    /// Mixed-radix code of a trajectory.
    pub fn encode(&self, states: &[usize], joint: &[usize]) -> usize {
        let j = self.joint_actions();
        let mut code = states[0];
        for t in 0..self.horizon {
            code = (code * j + joint[t]) * self.n_states + states[t + 1];
        }
        code
    }

    pub fn path_return(&self, path: usize) -> f64 {
        self.step_rewards.iter().map(|r| r[path]).sum()
    }

    pub fn returns(&self) -> Vec<f64> {
        (0..self.path_count().unwrap_or(0)).map(|p| self.path_return(p)).collect()
    }

    fn same_dynamics(&self, other: &DecPosdpSpec) -> bool {
        self.n_states == other.n_states
            && self.n_agents == other.n_agents
            && self.n_actions == other.n_actions
            && self.horizon == other.horizon
            && self.n_obs == other.n_obs
            && self.observation == other.observation
            && self.initial == other.initial
            && self.transition == other.transition
    }

    /// Same process with every trajectory's reward moved onto step 0.
    pub fn shifted_to_first_step(&self) -> DecPosdpSpec {
        let mut out = self.clone();
        let paths = self.step_rewards[0].len();
        for p in 0..paths {
            let total = self.path_return(p);
            for t in 0..self.horizon {
                out.step_rewards[t][p] = if t == 0 { total } else { 0.0 };
            }
        }
        out
    }

    /// Same process with each trajectory's return split across steps at random.
    pub fn resplit<R: Rng + ?Sized>(&self, rng: &mut R) -> DecPosdpSpec {
        let mut out = self.clone();
        for p in 0..self.step_rewards[0].len() {
            let total = self.path_return(p);
            let noise: Vec<f64> = (0..self.horizon).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = noise.iter().sum::<f64>() / self.horizon as f64;
            for t in 0..self.horizon {
                out.step_rewards[t][p] = total / self.horizon as f64 + noise[t] - mean;
            }
        }
        out
    }

    /// Random instance with uniform-weight transitions and rewards in `[−1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_agents: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Result<Self> {
        let dist = |rng: &mut R| {
            let w: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            let mut d: Vec<f64> = w.iter().map(|x| x / s).collect();
            // put the rounding residue on the last entry so rows sum to 1 tightly
            let head: f64 = d[..n_states - 1].iter().sum();
            d[n_states - 1] = 1.0 - head;
            d
        };
        let n_obs = n_states.max(1);
        let mut spec = DecPosdpSpec {
            n_states,
            n_agents,
            n_actions,
            horizon,
            n_obs,
            observation: (0..n_agents).map(|_| (0..n_states).map(|_| rng.random_range(0..n_obs)).collect()).collect(),
            initial: dist(rng),
            transition: Vec::new(),
            step_rewards: Vec::new(),
        };
        let paths = spec.checked_path_count()?;
        spec.transition = (0..n_states * spec.joint_actions()).map(|_| dist(rng)).collect();
        spec.step_rewards = (0..horizon).map(|_| (0..paths).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        spec.validate()?;
        Ok(spec)
    }
}

/// Time-indexed reactive joint policy: `probs[((i·T + t)·O + o)·A + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    n_agents: usize,
    horizon: usize,
    n_obs: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl JointPolicy {
    pub fn uniform(spec: &DecPosdpSpec) -> Self {
        let a = spec.n_actions;
        JointPolicy {
            n_agents: spec.n_agents,
            horizon: spec.horizon,
            n_obs: spec.n_obs,
            n_actions: a,
            probs: vec![1.0 / a as f64; spec.n_agents * spec.horizon * spec.n_obs * a],
        }
    }

    /// Number of deterministic policies, `A^(N·T·O)`, or `None` on overflow.
    pub fn deterministic_count(spec: &DecPosdpSpec) -> Option<usize> {
        checked_pow(spec.n_actions, spec.n_agents * spec.horizon * spec.n_obs)
    }

    /// The `index`-th deterministic policy in mixed-radix order.
    pub fn deterministic(spec: &DecPosdpSpec, mut index: usize) -> Self {
        let mut p = JointPolicy::uniform(spec);
        p.probs.iter_mut().for_each(|x| *x = 0.0);
        let a = spec.n_actions;
        for slot in 0..spec.n_agents * spec.horizon * spec.n_obs {
            p.probs[slot * a + index % a] = 1.0;
            index /= a;
        }
        p
    }

    pub fn random<R: Rng + ?Sized>(spec: &DecPosdpSpec, rng: &mut R) -> Self {
        let mut p = JointPolicy::uniform(spec);
        for row in p.probs.chunks_mut(spec.n_actions) {
            row.iter_mut().for_each(|x| *x = rng.random::<f64>() + 1e-3);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        p
    }

    pub fn prob(&self, agent: usize, t: usize, obs: usize, action: usize) -> f64 {
        self.probs[((agent * self.horizon + t) * self.n_obs + obs) * self.n_actions + action]
    }

    fn joint_prob(&self, spec: &DecPosdpSpec, t: usize, state: usize, mut joint: usize) -> f64 {
        let mut p = 1.0;
        for i in 0..self.n_agents {
            p *= self.prob(i, t, spec.observation[i][state], joint % self.n_actions);
            joint /= self.n_actions;
        }
        p
    }

    fn fits(&self, spec: &DecPosdpSpec) -> Result<()> {
        if (self.n_agents, self.horizon, self.n_obs, self.n_actions) != (spec.n_agents, spec.horizon, spec.n_obs, spec.n_actions) {
            return Err(Error::Contract("policy dimensions do not match the decision process".into()));
        }
        Ok(())
    }
}

/// Exact `Σ_τ p^π(τ)·R(τ)` by depth-first enumeration.
pub fn expected_return(spec: &DecPosdpSpec, policy: &JointPolicy) -> Result<f64> {
    spec.validate()?;
    policy.fits(spec)?;
    Ok(expected_return_unchecked(spec, policy, &spec.returns()))
}

fn expected_return_unchecked(spec: &DecPosdpSpec, policy: &JointPolicy, returns: &[f64]) -> f64 {
    fn walk(spec: &DecPosdpSpec, policy: &JointPolicy, returns: &[f64], t: usize, state: usize, code: usize, prob: f64) -> f64 {
        if t == spec.horizon {
            return prob * returns[code];
        }
        let mut acc = 0.0;
        for j in 0..spec.joint_actions() {
            let pa = policy.joint_prob(spec, t, state, j);
            if pa == 0.0 {
                continue;
            }
            let row = &spec.transition[state * spec.joint_actions() + j];
            for (next, &ps) in row.iter().enumerate() {
                if ps > 0.0 {
                    let c = (code * spec.joint_actions() + j) * spec.n_states + next;
                    acc += walk(spec, policy, returns, t + 1, next, c, prob * pa * ps);
                }
            }
        }
        acc
    }
    (0..spec.n_states)
        .filter(|&s| spec.initial[s] > 0.0)
        .map(|s| walk(spec, policy, returns, 0, s, s, spec.initial[s]))
        .sum()
}

fn sample_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples one trajectory and returns its code.
pub fn sample_path<R: Rng + ?Sized>(spec: &DecPosdpSpec, policy: &JointPolicy, rng: &mut R) -> usize {
    let mut state = sample_index(&spec.initial, rng);
    let mut code = state;
    let mut buf = vec![0.0; spec.n_actions];
    for t in 0..spec.horizon {
        let mut joint = 0;
        let mut radix = 1;
        for i in 0..spec.n_agents {
            let o = spec.observation[i][state];
            for (a, b) in buf.iter_mut().enumerate() {
                *b = policy.prob(i, t, o, a);
            }
            joint += sample_index(&buf, rng) * radix;
            radix *= spec.n_actions;
        }
        let next = sample_index(&spec.transition[state * spec.joint_actions() + joint], rng);
        code = (code * spec.joint_actions() + joint) * spec.n_states + next;
        state = next;
    }
    code
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn monte_carlo_return<R: Rng + ?Sized>(spec: &DecPosdpSpec, policy: &JointPolicy, samples: usize, rng: &mut R) -> Result<MonteCarloEstimate> {
    spec.validate()?;
    policy.fits(spec)?;
    if samples < 2 {
        return Err(Error::Contract("Monte-Carlo estimate needs at least two samples".into()));
    }
    let returns = spec.returns();
    let xs: Vec<f64> = (0..samples).map(|_| returns[sample_path(spec, policy, rng)]).collect();
    let mean = xs.iter().sum::<f64>() / samples as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    Ok(MonteCarloEstimate { mean, std_error: (var / samples as f64).sqrt(), samples })
}

/// Outcome of comparing two processes over all deterministic policies.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceVerdict {
    /// Every trajectory has the same return in both processes.
    pub return_equivalent: bool,
    pub max_return_gap: f64,
    pub policies: usize,
    pub optima_a: Vec<usize>,
    pub optima_b: Vec<usize>,
    pub best_a: f64,
    pub best_b: f64,
    pub same_optima: bool,
}

impl EquivalenceVerdict {
    /// The instance satisfies the hypothesis and the optima agree.
    pub fn confirms(&self) -> bool {
        self.return_equivalent && self.same_optima
    }
}

fn argmax_set(values: &[f64]) -> (f64, Vec<usize>) {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * (1.0 + best.abs());
    (best, values.iter().enumerate().filter(|(_, v)| **v >= best - tol).map(|(i, _)| i).collect())
}

/// Enumerates every deterministic reactive policy of both processes and
/// compares their sets of optimal policies.
pub fn check_return_equivalence(a: &DecPosdpSpec, b: &DecPosdpSpec) -> Result<EquivalenceVerdict> {
    a.validate()?;
    b.validate()?;
    if !a.same_dynamics(b) {
        return Err(Error::Contract("processes must share states, observations and transitions".into()));
    }
    let (ra, rb) = (a.returns(), b.returns());
    let max_return_gap = ra.iter().zip(&rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let return_equivalent = ra.iter().zip(&rb).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    let policies = JointPolicy::deterministic_count(a)
        .filter(|&n| n.saturating_mul(ra.len()) <= POLICY_WORK_BUDGET)
        .ok_or_else(|| Error::Size("deterministic policy enumeration exceeds the work budget".into()))?;
    let values = |r: &[f64]| -> Vec<f64> {
        (0..policies).map(|k| expected_return_unchecked(a, &JointPolicy::deterministic(a, k), r)).collect()
    };
    let (best_a, optima_a) = argmax_set(&values(&ra));
    let (best_b, optima_b) = argmax_set(&values(&rb));
    let same_optima = optima_a == optima_b;
    Ok(EquivalenceVerdict { return_equivalent, max_return_gap, policies, optima_a, optima_b, best_a, best_b, same_optima })
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub instances: usize,
    pub confirmed: usize,
    /// Instances whose optimal set has more than one policy.
    pub with_ties: usize,
    pub passed: bool,
}

/// Random instances paired with a return-preserving re-split of their rewards.
pub fn check_theorem_family(instances: usize, seed: u64, exec: Exec) -> Result<TheoremReport> {
    use rand::SeedableRng;
    let verdicts = exec.map_range(instances, |k| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let a = DecPosdpSpec::random(2, 2, 2, 3, &mut rng)?;
        let b = if k % 2 == 0 { a.resplit(&mut rng) } else { a.shifted_to_first_step() };
        check_return_equivalence(&a, &b)
    });
    let verdicts = verdicts.into_iter().collect::<Result<Vec<_>>>()?;
    let confirmed = verdicts.iter().filter(|v| v.confirms()).count();
    let with_ties = verdicts.iter().filter(|v| v.optima_a.len() > 1).count();
    Ok(TheoremReport { instances, confirmed, with_ties, passed: confirmed == instances })
}
