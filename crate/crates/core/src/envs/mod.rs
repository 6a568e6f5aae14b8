//! Small cooperative grid tasks with episodic rewards. Per-step rewards are
//! computed and accumulated internally; the agents see zero until the last
//! step, where the whole sum is revealed at once.

pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stay,
    Up,
    Down,
    Left,
    Right,
    Press,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right, Action::Press];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("invalid action id {i}; expected 0..{N_ACTIONS}")))
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay | Action::Press => (0, 0),
        }
    }
}

pub type Pos = (i64, i64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// N agents, N landmarks; penalized by distance to the closest landmark
    /// and by collisions.
    #[default]
    Navigation,
    /// Two buttons and a door; a bonus whenever both buttons are pressed in
    /// the same step by different agents.
    TwoButton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub name: String,
    pub task: Task,
    pub n_agents: usize,
    /// Side length of the square grid.
    pub grid: usize,
    pub horizon: usize,
    /// Landmarks (or buttons) listed in each observation.
    pub k_landmarks: usize,
    /// Other agents listed in each observation.
    pub k_agents: usize,
    /// Chebyshev radius beyond which entities are not observed.
    pub obs_radius: Option<usize>,
    pub lambda_distance: f64,
    pub lambda_collision: f64,
    pub press_bonus: f64,
    /// Two-button only: buttons and door sit at fixed cells instead of
    /// being drawn per episode.
    pub fixed_layout: bool,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::navigation(2)
    }
}

impl EnvSpec {
    pub fn navigation(n_agents: usize) -> Self {
        EnvSpec {
            name: format!("navigation_{n_agents}"),
            task: Task::Navigation,
            n_agents,
            grid: 7,
            horizon: 20,
            k_landmarks: n_agents,
            k_agents: n_agents.saturating_sub(1),
            obs_radius: None,
            lambda_distance: 0.1,
            lambda_collision: 1.0,
            press_bonus: 0.0,
            fixed_layout: false,
        }
    }

    pub fn two_button() -> Self {
        EnvSpec {
            name: "two_button".into(),
            task: Task::TwoButton,
            n_agents: 2,
            grid: 7,
            horizon: 20,
            k_landmarks: 2,
            k_agents: 1,
            obs_radius: None,
            lambda_distance: 0.0,
            lambda_collision: 0.0,
            press_bonus: 1.0,
            fixed_layout: false,
        }
    }

    pub fn n_landmarks(&self) -> usize {
        match self.task {
            Task::Navigation => self.n_agents,
            Task::TwoButton => 2,
        }
    }

    pub fn obs_dim(&self) -> usize {
        2 + 2 * self.k_landmarks + 2 * self.k_agents
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.horizon == 0 || self.n_agents == 0 || self.grid == 0 {
            return bad("horizon, agent count and grid size must be positive".into());
        }
        if ![self.lambda_distance, self.lambda_collision, self.press_bonus].iter().all(|v| v.is_finite()) {
            return bad("reward coefficients must be finite".into());
        }
        let cells = self.grid * self.grid;
        // Landmarks (plus the door) occupy distinct cells, as do agents.
        let fixed = self.n_landmarks() + usize::from(self.task == Task::TwoButton);
        if fixed > cells || self.n_agents > cells {
            return bad(format!(
                "{} agents and {fixed} fixed objects do not fit on a {g}x{g} grid",
                self.n_agents,
                g = self.grid
            ));
        }
        if self.task == Task::TwoButton && self.n_agents < 2 {
            return bad("the two-button task needs at least two agents".into());
        }
        Ok(())
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    pub done: bool,
    /// Zero until the final step, then the accumulated hidden reward.
    pub revealed: f64,
    /// Ground-truth reward of this step (never shown to learners).
    pub hidden: f64,
    /// Two-button: the door opened on this step.
    pub door_opened: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    agents: Vec<Pos>,
    landmarks: Vec<Pos>,
    door: Option<Pos>,
    t: usize,
    accumulated: f64,
    door_ever_opened: bool,
}

impl Env {
    /// Random layout drawn from `seed`.
    pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(Self, Vec<Vec<f64>>)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = spec.grid as i64;
        let mut cells: Vec<Pos> = (0..g).flat_map(|y| (0..g).map(move |x| (x, y))).collect();
        let (landmarks, door) = match (spec.task, spec.fixed_layout) {
            (Task::TwoButton, true) => {
                let c = g / 2;
                (vec![(0, g - 1), (g - 1, g - 1)], Some((c, 0)))
            }
            _ => {
                cells.shuffle(&mut rng);
                let lm = cells[..spec.n_landmarks()].to_vec();
                let door = (spec.task == Task::TwoButton).then(|| cells[spec.n_landmarks()]);
                (lm, door)
            }
        };
        cells.shuffle(&mut rng);
        let agents = cells[..spec.n_agents].to_vec();
        let env = Env::from_layout(spec, agents, landmarks, door)?;
        let obs = env.observe_all();
        Ok((env, obs))
    }

    /// Explicit layout, for tests and hand-built scenarios.
    pub fn from_layout(spec: &EnvSpec, agents: Vec<Pos>, landmarks: Vec<Pos>, door: Option<Pos>) -> Result<Self> {
        spec.validate()?;
        let g = spec.grid as i64;
        let inside = |p: &Pos| (0..g).contains(&p.0) && (0..g).contains(&p.1);
        if agents.len() != spec.n_agents || landmarks.len() != spec.n_landmarks() {
            return Err(Error::Config(format!(
                "layout has {} agents and {} landmarks; spec wants {} and {}",
                agents.len(),
                landmarks.len(),
                spec.n_agents,
                spec.n_landmarks()
            )));
        }
        if !agents.iter().chain(&landmarks).chain(door.iter()).all(inside) {
            return Err(Error::Config("layout position outside the grid".into()));
        }
        Ok(Env { spec: spec.clone(), agents, landmarks, door, t: 0, accumulated: 0.0, door_ever_opened: false })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn agents(&self) -> &[Pos] {
        &self.agents
    }

    pub fn landmarks(&self) -> &[Pos] {
        &self.landmarks
    }

    pub fn door(&self) -> Option<Pos> {
        self.door
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.spec.horizon
    }

    pub fn door_ever_opened(&self) -> bool {
        self.door_ever_opened
    }

    pub fn step(&mut self, joint: &[usize]) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::Contract("step after the episode ended".into()));
        }
        if joint.len() != self.spec.n_agents {
            return Err(Error::Contract(format!("{} actions for {} agents", joint.len(), self.spec.n_agents)));
        }
        let actions = joint.iter().map(|&a| Action::from_index(a)).collect::<Result<Vec<_>>>()?;
        let g = self.spec.grid as i64;
        for (p, a) in self.agents.iter_mut().zip(&actions) {
            let (dx, dy) = a.delta();
            *p = ((p.0 + dx).clamp(0, g - 1), (p.1 + dy).clamp(0, g - 1));
        }
        let (hidden, door_opened) = match self.spec.task {
            Task::Navigation => (self.navigation_reward(), false),
            Task::TwoButton => {
                let opened = self.buttons_pressed(&actions);
                (if opened { self.spec.press_bonus } else { 0.0 }, opened)
            }
        };
        self.door_ever_opened |= door_opened;
        self.accumulated += hidden;
        self.t += 1;
        let done = self.done();
        Ok(StepOutcome {
            observations: self.observe_all(),
            done,
            revealed: if done { self.accumulated } else { 0.0 },
            hidden,
            door_opened,
        })
    }

    fn navigation_reward(&self) -> f64 {
        let dist: f64 = self
            .agents
            .iter()
            .map(|a| self.landmarks.iter().map(|l| euclid(*a, *l)).fold(f64::INFINITY, f64::min))
            .sum();
        let mut collisions = 0usize;
        for i in 0..self.agents.len() {
            for j in i + 1..self.agents.len() {
                collisions += usize::from(self.agents[i] == self.agents[j]);
            }
        }
        -self.spec.lambda_distance * dist - self.spec.lambda_collision * collisions as f64
    }

    /// Every button has a distinct agent standing on it and pressing.
    fn buttons_pressed(&self, actions: &[Action]) -> bool {
        let pressers = |b: Pos| -> Vec<usize> {
            (0..self.agents.len())
                .filter(|&i| self.agents[i] == b && actions[i] == Action::Press)
                .collect()
        };
        let (p0, p1) = (pressers(self.landmarks[0]), pressers(self.landmarks[1]));
        // Buttons occupy distinct cells, so any presser pair is distinct.
        !p0.is_empty() && !p1.is_empty()
    }

    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.spec.n_agents).map(|i| self.observe(i)).collect()
    }

    /// Own position, then offsets to the nearest landmarks and agents. Ties
    /// go to the lower index; missing or out-of-range slots are zero.
    pub fn observe(&self, i: usize) -> Vec<f64> {
        let me = self.agents[i];
        let mut out = Vec::with_capacity(self.spec.obs_dim());
        out.extend([me.0 as f64, me.1 as f64]);
        let others: Vec<Pos> = (0..self.agents.len()).filter(|&j| j != i).map(|j| self.agents[j]).collect();
        for (set, k) in [(&self.landmarks, self.spec.k_landmarks), (&others, self.spec.k_agents)] {
            let near = nearest(me, set, k, self.spec.obs_radius);
            for s in 0..k {
                match near.get(s) {
                    Some(p) => out.extend([(p.0 - me.0) as f64, (p.1 - me.1) as f64]),
                    None => out.extend([0.0, 0.0]),
                }
            }
        }
        out
    }
}

fn euclid(a: Pos, b: Pos) -> f64 {
    (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt()
}

fn nearest(me: Pos, set: &[Pos], k: usize, radius: Option<usize>) -> Vec<Pos> {
    let mut idx: Vec<usize> = (0..set.len())
        .filter(|&j| radius.is_none_or(|r| (set[j].0 - me.0).abs().max((set[j].1 - me.1).abs()) <= r as i64))
        .collect();
    // Stable sort keeps lower indices first among equal distances.
    idx.sort_by_key(|&j| (set[j].0 - me.0).pow(2) + (set[j].1 - me.1).pow(2));
    idx.into_iter().take(k).map(|j| set[j]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_layout() {
        let spec = EnvSpec::navigation(3);
        let (a, oa) = Env::reset(&spec, 11).unwrap();
        let (b, ob) = Env::reset(&spec, 11).unwrap();
        assert_eq!(a.agents(), b.agents());
        assert_eq!(a.landmarks(), b.landmarks());
        assert_eq!(oa, ob);
        assert_eq!(a.agents().len(), 3);
        assert_eq!(a.landmarks().len(), 3);
    }

    #[test]
    fn two_button_layout() {
        let (env, _) = Env::reset(&EnvSpec::two_button(), 4).unwrap();
        assert_eq!(env.landmarks().len(), 2);
        let door = env.door().unwrap();
        assert!(!env.landmarks().contains(&door));
        assert_ne!(env.landmarks()[0], env.landmarks()[1]);
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let mut spec = EnvSpec::navigation(5);
        spec.grid = 2;
        assert!(matches!(Env::reset(&spec, 0), Err(Error::Config(_))));
        let mut spec = EnvSpec::two_button();
        spec.n_agents = 1;
        assert!(matches!(Env::reset(&spec, 0), Err(Error::Config(_))));
        let mut spec = EnvSpec::navigation(2);
        spec.lambda_distance = f64::NAN;
        assert!(matches!(Env::reset(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_action_is_a_contract_error() {
        let (mut env, _) = Env::reset(&EnvSpec::navigation(2), 0).unwrap();
        assert!(matches!(env.step(&[0, 6]), Err(Error::Contract(_))));
        assert!(matches!(env.step(&[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn rewards_are_revealed_only_at_the_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [EnvSpec::navigation(3), EnvSpec::two_button()] {
            let (mut env, _) = Env::reset(&spec, 2).unwrap();
            let mut hidden = 0.0;
            for t in 0..spec.horizon {
                let joint: Vec<usize> = (0..spec.n_agents).map(|_| rng.random_range(0..N_ACTIONS)).collect();
                let out = env.step(&joint).unwrap();
                hidden += out.hidden;
                if t + 1 < spec.horizon {
                    assert_eq!(out.revealed, 0.0);
                    assert!(!out.done);
                } else {
                    assert!(out.done);
                    assert!((out.revealed - hidden).abs() <= 1e-12);
                }
            }
            assert!(env.step(&vec![0; spec.n_agents]).is_err());
        }
    }

    #[test]
    fn simultaneous_distinct_presses_open_the_door() {
        let spec = EnvSpec::two_button();
        let buttons = vec![(1, 1), (5, 5)];
        let mut env = Env::from_layout(&spec, vec![(1, 1), (5, 5)], buttons.clone(), Some((3, 0))).unwrap();
        let out = env.step(&[5, 5]).unwrap();
        assert!(out.door_opened);
        assert_eq!(out.hidden, 1.0);
        // Both on the same button: no bonus.
        let mut env = Env::from_layout(&spec, vec![(1, 1), (1, 1)], buttons.clone(), Some((3, 0))).unwrap();
        let out = env.step(&[5, 5]).unwrap();
        assert!(!out.door_opened);
        assert_eq!(out.hidden, 0.0);
        // Only one presses.
        let mut env = Env::from_layout(&spec, vec![(1, 1), (5, 5)], buttons, Some((3, 0))).unwrap();
        assert_eq!(env.step(&[5, 0]).unwrap().hidden, 0.0);
    }

    #[test]
    fn navigation_reward_formula() {
        let spec = EnvSpec::navigation(2);
        let mut env = Env::from_layout(&spec, vec![(0, 0), (0, 0)], vec![(3, 4), (6, 6)], None).unwrap();
        let out = env.step(&[0, 0]).unwrap();
        // Both agents are 5 from the nearest landmark and collide once.
        assert!((out.hidden - (-0.1 * 10.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn observation_layout_and_padding() {
        let mut spec = EnvSpec::navigation(1);
        spec.k_agents = 2;
        let env = Env::from_layout(&spec, vec![(2, 3)], vec![(2, 3)], None).unwrap();
        let o = env.observe(0);
        assert_eq!(o.len(), spec.obs_dim());
        assert_eq!(o, vec![2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nearest_ties_go_to_lower_index() {
        let mut spec = EnvSpec::navigation(3);
        spec.k_agents = 1;
        // Agents 1 and 2 are both at distance 1 from agent 0.
        let lm = vec![(6, 6), (6, 5), (6, 4)];
        let env = Env::from_layout(&spec, vec![(3, 3), (2, 3), (4, 3)], lm.clone(), None).unwrap();
        let swapped = Env::from_layout(&spec, vec![(3, 3), (4, 3), (2, 3)], lm, None).unwrap();
        let (a, b) = (env.observe(0), swapped.observe(0));
        assert_eq!(&a[a.len() - 2..], &[-1.0, 0.0]);
        assert_eq!(&b[b.len() - 2..], &[1.0, 0.0]);
        assert_eq!(a[..a.len() - 2], b[..b.len() - 2]);
    }

    #[test]
    fn observation_radius_hides_far_entities() {
        let mut spec = EnvSpec::navigation(2);
        spec.obs_radius = Some(1);
        let env = Env::from_layout(&spec, vec![(0, 0), (5, 5)], vec![(1, 1), (6, 6)], None).unwrap();
        assert_eq!(env.observe(0), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relabeling_agents_permutes_observations() {
        let spec = EnvSpec::navigation(3);
        let lm = vec![(0, 0), (6, 6), (3, 0)];
        let pos = vec![(1, 1), (5, 2), (2, 6)];
        let perm = [2, 0, 1];
        let mut a = Env::from_layout(&spec, pos.clone(), lm.clone(), None).unwrap();
        let mut b = Env::from_layout(&spec, perm.iter().map(|&p| pos[p]).collect(), lm, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut ra, mut rb) = (0.0, 0.0);
        for _ in 0..spec.horizon {
            let joint: Vec<usize> = (0..3).map(|_| rng.random_range(0..N_ACTIONS)).collect();
            let pj: Vec<usize> = perm.iter().map(|&p| joint[p]).collect();
            let (oa, ob) = (a.step(&joint).unwrap(), b.step(&pj).unwrap());
            for (k, &p) in perm.iter().enumerate() {
                let (x, y) = (&ob.observations[k], &oa.observations[p]);
                // Own position and landmark slots match exactly; agent slots
                // may reorder when two agents are equidistant.
                let split = 2 + 2 * spec.k_landmarks;
                assert_eq!(x[..split], y[..split]);
                let pairs = |v: &[f64]| {
                    let mut p: Vec<(i64, i64)> = v.chunks(2).map(|c| (c[0] as i64, c[1] as i64)).collect();
                    p.sort();
                    p
                };
                assert_eq!(pairs(&x[split..]), pairs(&y[split..]));
            }
            ra += oa.revealed;
            rb += ob.revealed;
        }
        assert!((ra - rb).abs() < 1e-12);
    }
}
