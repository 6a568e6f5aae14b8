//! Permutation-invariant reward readout and the credit-assignment losses.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::error::{Error, Result};
use crate::ndtensor::{ParamStore, Tape, Tensor, Var};

/// How the hidden layers of the readout are initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadInit {
    /// Weights from N(0, 1/fan_in), zero biases.
    FanIn,
    /// Every weight and bias from N(0, 1/width).
    Isotropic,
}

/// `r̂_t = g₂(Σᵢ g₁(z_{t,i}))` with one-hidden-layer MLPs `g₁`, `g₂`.
#[derive(Debug, Clone)]
pub struct CreditHead {
    g1_hidden: Linear,
    g1_out: Linear,
    g2_hidden: Linear,
    g2_out: Linear,
}

impl CreditHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_in: usize, hidden: usize, init: HeadInit, rng: &mut R) -> Self {
        let mut layer = |name: &str, a: usize, b: usize, rng: &mut R| match init {
            HeadInit::FanIn => Linear::new(store, name, a, b, rng),
            HeadInit::Isotropic => {
                let std = (1.0 / hidden as f64).sqrt();
                let weight = store.add(format!("{name}.weight"), Tensor::randn(vec![a, b], std, rng));
                let bias = Some(store.add(format!("{name}.bias"), Tensor::randn(vec![b], std, rng)));
                Linear { weight, bias }
            }
        };
        CreditHead {
            g1_hidden: layer("head.g1.hidden", d_in, hidden, rng),
            g1_out: layer("head.g1.out", hidden, hidden, rng),
            g2_hidden: layer("head.g2.hidden", hidden, hidden, rng),
            g2_out: layer("head.g2.out", hidden, 1, rng),
        }
    }

    /// Per-agent features `[B, T, N, H]` after `g₁`.
    pub fn agent_codes(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.g1_hidden.forward(tape, store, z)?;
        let h = tape.relu(h)?;
        self.g1_out.forward(tape, store, h)
    }

    /// `z: [B, T, N, D]` to predicted rewards `[B, T]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!("credit head expects [B, T, N, D], got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[1]);
        let codes = self.agent_codes(tape, store, z)?;
        let pooled = tape.sum_axis(codes, 2)?;
        self.readout(tape, store, pooled, b, t)
    }

    /// `g₂` applied to pooled codes `[B, T, 1, H]`.
    pub fn readout(&self, tape: &mut Tape, store: &ParamStore, pooled: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.g2_hidden.forward(tape, store, pooled)?;
        let h = tape.relu(h)?;
        let r = self.g2_out.forward(tape, store, h)?;
        tape.reshape(r, &[b, t])
    }
}

/// Which regularizer accompanies the regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    Variance,
    L1,
    L2,
}

impl std::str::FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Regularizer::Variance),
            "l1" => Ok(Regularizer::L1),
            "l2" => Ok(Regularizer::L2),
            other => Err(Error::Config(format!("unknown regularizer {other:?}"))),
        }
    }
}

/// Predicted per-step rewards for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributedReward {
    pub episode_id: u64,
    pub values: Vec<f64>,
}

// ---- scalar reference losses (one episode) ---------------------------------

/// `(1/T)(Σ_t r̂_t − R)²`
pub fn regression_loss(r_hat: &[f64], episodic_reward: f64) -> Result<f64> {
    let t = nonempty(r_hat)?;
    let s: f64 = r_hat.iter().sum();
    Ok((s - episodic_reward).powi(2) / t)
}

/// Population variance of `r̂` over time.
pub fn variance_loss(r_hat: &[f64]) -> Result<f64> {
    let t = nonempty(r_hat)?;
    let mean = r_hat.iter().sum::<f64>() / t;
    Ok(r_hat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t)
}

pub fn l1_loss(r_hat: &[f64]) -> Result<f64> {
    let t = nonempty(r_hat)?;
    Ok(r_hat.iter().map(|v| v.abs()).sum::<f64>() / t)
}

pub fn l2_loss(r_hat: &[f64]) -> Result<f64> {
    let t = nonempty(r_hat)?;
    Ok(r_hat.iter().map(|v| v * v).sum::<f64>() / t)
}

pub fn regularizer_loss(r_hat: &[f64], kind: Regularizer) -> Result<f64> {
    match kind {
        Regularizer::Variance => variance_loss(r_hat),
        Regularizer::L1 => l1_loss(r_hat),
        Regularizer::L2 => l2_loss(r_hat),
    }
}

/// Batch mean of `l_r + ω·l_reg` over episodes.
pub fn total_loss(batch: &[(&[f64], f64)], kind: Regularizer, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut acc = 0.0;
    for (r_hat, r) in batch {
        acc += regression_loss(r_hat, *r)? + omega * regularizer_loss(r_hat, kind)?;
    }
    Ok(acc / batch.len() as f64)
}

pub(crate) fn check_omega(omega: f64) -> Result<()> {
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::Config(format!("regularization weight must be finite and non-negative, got {omega}")));
    }
    Ok(())
}

fn nonempty(r_hat: &[f64]) -> Result<f64> {
    if r_hat.is_empty() {
        return Err(Error::Dimension("reward sequence must have T ≥ 1".into()));
    }
    Ok(r_hat.len() as f64)
}

// ---- differentiable batch losses -------------------------------------------

/// Loss components recorded on a tape for a padded batch.
pub struct LossTerms {
    pub regression: Var,
    pub regularizer: Var,
    pub total: Var,
}

/// Constant tensors describing a padded batch of episodes.
pub struct LossTargets {
    /// `[B]` episodic rewards.
    pub episodic: Tensor,
    /// `[B, T]` with 1 on real steps and 0 on padding.
    pub valid: Tensor,
    /// `[B, 1]` holding `1/T_b`.
    pub inv_len: Tensor,
}

impl LossTargets {
    pub fn new(episodic: &[f64], lengths: &[usize], t_max: usize) -> Result<Self> {
        if episodic.len() != lengths.len() || episodic.is_empty() {
            return Err(Error::Dimension("episodic rewards and lengths must be non-empty and aligned".into()));
        }
        if lengths.iter().any(|&l| l == 0 || l > t_max) {
            return Err(Error::Dimension(format!("episode lengths {lengths:?} must lie in 1..={t_max}")));
        }
        let b = lengths.len();
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..t_max).map(move |t| if t < l { 1.0 } else { 0.0 }))
            .collect();
        Ok(LossTargets {
            episodic: Tensor::new(vec![b, 1], episodic.to_vec())?,
            valid: Tensor::new(vec![b, t_max], valid)?,
            inv_len: Tensor::new(vec![b, 1], lengths.iter().map(|&l| 1.0 / l as f64).collect())?,
        })
    }
}

/// Records `l_r + ω·l_reg` for predictions `r_hat: [B, T]`.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    r_hat: Var,
    targets: &LossTargets,
    kind: Regularizer,
    omega: f64,
) -> Result<LossTerms> {
    check_omega(omega)?;
    let valid = tape.constant(targets.valid.clone());
    let inv_len = tape.constant(targets.inv_len.clone());
    let episodic = tape.constant(targets.episodic.clone());
    let masked = tape.mul(r_hat, valid)?;
    let sums = tape.sum_axis(masked, 1)?;
    let diff = tape.sub(sums, episodic)?;
    let sq = tape.square(diff)?;
    let per_ep = tape.mul(sq, inv_len)?;
    let regression = tape.mean(per_ep)?;
    let per_step = match kind {
        Regularizer::Variance => {
            let mean = tape.mul(sums, inv_len)?;
            let dev = tape.sub(r_hat, mean)?;
            let dev = tape.mul(dev, valid)?;
            tape.square(dev)?
        }
        Regularizer::L1 => tape.abs(masked)?,
        Regularizer::L2 => tape.square(masked)?,
    };
    let reg_sum = tape.sum_axis(per_step, 1)?;
    let reg_ep = tape.mul(reg_sum, inv_len)?;
    let regularizer = tape.mean(reg_ep)?;
    let weighted = tape.scale(regularizer, omega)?;
    let total = tape.add(regression, weighted)?;
    Ok(LossTerms { regression, regularizer, total })
}

/// Per-episode min-max scaling to `[0, 1]`; a constant episode maps to 0.5.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Writes `episode_id,t,r_hat,r_hat_normalized_0_1[,true_reward]` rows.
pub fn write_rewards_csv(path: &Path, rows: &[(RedistributedReward, Option<Vec<f64>>)]) -> Result<()> {
    let with_truth = rows.iter().any(|(_, t)| t.is_some());
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["episode_id", "t", "r_hat", "r_hat_normalized_0_1"];
        if with_truth {
            header.push("true_reward");
        }
        w.write_record(&header)?;
        for (r, truth) in rows {
            let unit = normalize_unit(&r.values);
            for (t, v) in r.values.iter().enumerate() {
                let mut rec = vec![r.episode_id.to_string(), t.to_string(), v.to_string(), unit[t].to_string()];
                if with_truth {
                    rec.push(truth.as_ref().and_then(|x| x.get(t)).map_or(String::new(), |x| x.to_string()));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    crate::io::write_atomic(path, |f| Ok(f.write_all(&buf)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regression_loss_examples() {
        assert_eq!(regression_loss(&[1., 2., 3.], 6.0).unwrap(), 0.0);
        assert_eq!(regression_loss(&[0., 0.], 2.0).unwrap(), 2.0);
        let base = regression_loss(&[0.3, -1.2, 2.0], 0.7).unwrap();
        let scaled = regression_loss(&[0.9, -3.6, 6.0], 2.1).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        assert!(regression_loss(&[], 1.0).is_err());
    }

    #[test]
    fn variance_loss_examples() {
        assert_eq!(variance_loss(&[4., 4., 4.]).unwrap(), 0.0);
        assert!((variance_loss(&[1., 2., 3.]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((variance_loss(&[3., 1., 2.]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn l1_l2_examples() {
        assert_eq!(l1_loss(&[1., -1.]).unwrap(), 1.0);
        assert_eq!(l2_loss(&[1., -1.]).unwrap(), 1.0);
        assert_eq!(l1_loss(&[0., 0.]).unwrap(), 0.0);
        assert_eq!(l2_loss(&[0., 0.]).unwrap(), 0.0);
        assert!(l2_loss(&[0., 1e-200]).unwrap() >= 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let r = [1.0, 3.0];
        let batch = [(&r[..], 1.0)];
        let lr = regression_loss(&r, 1.0).unwrap();
        assert_eq!(total_loss(&batch, Regularizer::Variance, 0.0).unwrap(), lr);
        let want = lr + 20.0 * variance_loss(&r).unwrap();
        assert!((total_loss(&batch, Regularizer::Variance, 20.0).unwrap() - want).abs() < 1e-12);
        assert!(matches!(total_loss(&batch, Regularizer::L1, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn tape_losses_match_scalar_reference_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lengths = [3usize, 5, 1];
        let t_max = 5;
        let data = Tensor::randn(vec![3, t_max], 1.0, &mut rng);
        let episodic = [0.4, -2.0, 1.5];
        let targets = LossTargets::new(&episodic, &lengths, t_max).unwrap();
        for kind in [Regularizer::Variance, Regularizer::L1, Regularizer::L2] {
            let mut tape = Tape::new();
            let r = tape.input(data.clone());
            let terms = total_loss_on_tape(&mut tape, r, &targets, kind, 7.0).unwrap();
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|b| data.data()[b * t_max..b * t_max + lengths[b]].to_vec())
                .collect();
            let batch: Vec<(&[f64], f64)> = rows.iter().map(|r| r.as_slice()).zip(episodic).collect();
            let want = total_loss(&batch, kind, 7.0).unwrap();
            let got = tape.value(terms.total).item().unwrap();
            assert!((got - want).abs() < 1e-12, "{kind:?}: {got} vs {want}");
            // Padding must not receive gradient.
            let g = tape.backward(terms.total).unwrap();
            let gr = g.get(r).unwrap();
            assert_eq!(gr.get(&[2, 3]), 0.0);
            assert_eq!(gr.get(&[0, 4]), 0.0);
        }
    }

    #[test]
    fn head_is_agent_permutation_invariant_and_sums_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let head = CreditHead::new(&mut store, 4, 6, HeadInit::FanIn, &mut rng);
        let z = Tensor::randn(vec![1, 3, 3, 4], 1.0, &mut rng);
        // Swap agents 0 and 2.
        let mut swapped = z.clone();
        for t in 0..3 {
            for k in 0..4 {
                swapped.data_mut()[(t * 3) * 4 + k] = z.get(&[0, t, 2, k]);
                swapped.data_mut()[(t * 3 + 2) * 4 + k] = z.get(&[0, t, 0, k]);
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(z.clone());
        let b = tape.constant(swapped);
        let ra = head.forward(&mut tape, &store, a).unwrap();
        let rb = head.forward(&mut tape, &store, b).unwrap();
        assert!(tape.value(ra).max_abs_diff(tape.value(rb)).unwrap() <= 1e-12);

        // Duplicating every agent doubles the pooled g₁ code.
        let mut dup = Vec::new();
        for t in 0..3 {
            for _ in 0..2 {
                for i in 0..3 {
                    dup.extend((0..4).map(|k| z.get(&[0, t, i, k])));
                }
            }
        }
        let d = tape.constant(Tensor::new(vec![1, 3, 6, 4], dup).unwrap());
        let ca = head.agent_codes(&mut tape, &store, a).unwrap();
        let cd = head.agent_codes(&mut tape, &store, d).unwrap();
        let pa = tape.sum_axis(ca, 2).unwrap();
        let pd = tape.sum_axis(cd, 2).unwrap();
        let twice = tape.value(pa).map(|v| 2.0 * v);
        assert!(tape.value(pd).max_abs_diff(&twice).unwrap() < 1e-12);
    }

    #[test]
    fn zero_features_give_constant_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let head = CreditHead::new(&mut store, 4, 5, HeadInit::FanIn, &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![1, 6, 2, 4]));
        let r = head.forward(&mut tape, &store, z).unwrap();
        let v = tape.value(r).data();
        assert!(v.iter().all(|&x| x == v[0]));
    }

    #[test]
    fn csv_export_has_truth_column_when_available() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![(RedistributedReward { episode_id: 7, values: vec![0.5, 1.5] }, Some(vec![0.0, 2.0]))];
        write_rewards_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "episode_id,t,r_hat,r_hat_normalized_0_1,true_reward\n7,0,0.5,0,0\n7,1,1.5,1,2\n");
    }

    #[test]
    fn unit_normalization() {
        assert_eq!(normalize_unit(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_unit(&[-1.0, -1.0]), vec![0.5, 0.5]);
    }
}
