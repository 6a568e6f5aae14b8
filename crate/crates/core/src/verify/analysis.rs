//! Numeric checks on the credit losses: the uniform-redistribution
//! counterexample, the bias-variance upper bound and the width trend of
//! prediction variance at initialization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::credit::{CreditHead, HeadInit};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ndtensor::{ParamStore, Tape, Tensor};

// ---- uniform redistribution ------------------------------------------------

/// Episodes as sequences of state labels with their episodic rewards; a
/// redistribution assigns one reward per label.
#[derive(Debug, Clone)]
pub struct LabelledEpisodes {
    pub episodes: Vec<Vec<usize>>,
    pub totals: Vec<f64>,
    pub n_labels: usize,
}

/// Minimum of the batch regression loss when the variables in each class of
/// `classes` are forced equal, with the time variance of that minimizer.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConstrainedFit {
    pub regression: f64,
    pub variance: f64,
}

impl LabelledEpisodes {
    /// Least squares over the label rewards with `classes[label]` tying labels.
    pub fn fit(&self, classes: &[usize]) -> Result<ConstrainedFit> {
        if classes.len() != self.n_labels || self.episodes.len() != self.totals.len() || self.episodes.is_empty() {
            return Err(Error::Contract("class map or totals do not match the episodes".into()));
        }
        let n_classes = classes.iter().max().map_or(0, |m| m + 1);
        let e = self.episodes.len() as f64;
        let mut a = DMatrix::<f64>::zeros(self.episodes.len(), n_classes);
        let mut y = DVector::<f64>::zeros(self.episodes.len());
        for (row, (ep, total)) in self.episodes.iter().zip(&self.totals).enumerate() {
            let w = 1.0 / (ep.len() as f64 * e).sqrt();
            for &label in ep {
                a[(row, classes[label])] += w;
            }
            y[row] = w * total;
        }
        let x = a
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|m| Error::Numeric(format!("least-squares solve failed: {m}")))?;
        let regression = (&a * &x - &y).norm_squared();
        let variance = self
            .episodes
            .iter()
            .map(|ep| {
                let r: Vec<f64> = ep.iter().map(|&l| x[classes[l]]).collect();
                let m = r.iter().sum::<f64>() / r.len() as f64;
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64
            })
            .sum::<f64>()
            / e;
        Ok(ConstrainedFit { regression, variance })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InfeasibilityReport {
    pub length: usize,
    pub totals: [f64; 2],
    /// State-consistent and uniform within each episode.
    pub uniform: ConstrainedFit,
    /// Uniform, but the shared state may take a different value per episode.
    pub uniform_unshared: ConstrainedFit,
    /// State-consistent only.
    pub consistent: ConstrainedFit,
    /// Whether `l_r = l_v = 0` is reachable under the full constraint.
    pub feasible: bool,
}

/// Two episodes of length `length` passing through one common state in the
/// middle; every other state is visited once.
pub fn uniform_infeasibility(length: usize, r_j: f64, r_k: f64) -> Result<InfeasibilityReport> {
    if length < 2 {
        return Err(Error::Config("episodes need at least two steps".into()));
    }
    let mid = length / 2;
    // labels: episode j uses 0..L, episode k reuses label `mid` and owns L..2L−1
    let ep_j: Vec<usize> = (0..length).collect();
    let ep_k: Vec<usize> = (0..length).map(|t| if t == mid { mid } else { length + t - usize::from(t > mid) }).collect();
    let n_labels = 2 * length - 1;
    let data = LabelledEpisodes { episodes: vec![ep_j, ep_k], totals: vec![r_j, r_k], n_labels };
    // same construction with the shared state duplicated
    let split = LabelledEpisodes {
        episodes: vec![data.episodes[0].clone(), data.episodes[1].iter().map(|&l| if l == mid { n_labels } else { l }).collect()],
        totals: data.totals.clone(),
        n_labels: n_labels + 1,
    };
    let uniform_classes: Vec<usize> = vec![0; n_labels];
    let unshared_classes: Vec<usize> = (0..=n_labels).map(|l| usize::from(l >= length)).collect();
    let identity: Vec<usize> = (0..n_labels).collect();
    let uniform = data.fit(&uniform_classes)?;
    Ok(InfeasibilityReport {
        length,
        totals: [r_j, r_k],
        uniform,
        uniform_unshared: split.fit(&unshared_classes)?,
        consistent: data.fit(&identity)?,
        feasible: uniform.regression <= 1e-12,
    })
}

/// The shared-state example with `L = 3`, `R_j = 3`, `R_k = 6`.
pub fn check_uniform_infeasibility() -> Result<InfeasibilityReport> {
    uniform_infeasibility(3, 3.0, 6.0)
}

// ---- bias-variance bound ---------------------------------------------------

/// One predictor ensemble: `samples[s][t]` are predictions for a trajectory
/// with ground-truth rewards `target[t]`.
#[derive(Debug, Clone)]
pub struct PredictorEnsemble {
    pub target: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundCase {
    pub horizon: usize,
    pub samples: usize,
    pub omega: f64,
    /// Loss with the per-step ensemble mean as the variance centre.
    pub loss_total: f64,
    pub bound: f64,
    /// Loss with the within-episode time mean as the variance centre.
    pub loss_total_time_centred: f64,
}

impl BoundCase {
    pub fn slack(&self) -> f64 {
        self.bound - self.loss_total
    }
}

impl PredictorEnsemble {
    fn step_means(&self) -> Vec<f64> {
        let s = self.samples.len() as f64;
        (0..self.target.len()).map(|t| self.samples.iter().map(|f| f[t]).sum::<f64>() / s).collect()
    }

    pub fn evaluate(&self, omega: f64) -> BoundCase {
        let t_len = self.target.len() as f64;
        let s = self.samples.len() as f64;
        let mean = self.step_means();
        let mut loss = 0.0;
        let mut loss_time = 0.0;
        for f in &self.samples {
            let reg = (f.iter().zip(&self.target).map(|(a, b)| a - b).sum::<f64>()).powi(2) / t_len;
            let var_step = f.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / t_len;
            let m = f.iter().sum::<f64>() / t_len;
            let var_time = f.iter().map(|a| (a - m).powi(2)).sum::<f64>() / t_len;
            loss += reg + omega * var_step;
            loss_time += reg + omega * var_time;
        }
        let bound: f64 = (0..self.target.len())
            .map(|t| {
                let var = self.samples.iter().map(|f| (f[t] - mean[t]).powi(2)).sum::<f64>() / s;
                (1.0 + omega / t_len) * var + (mean[t] - self.target[t]).powi(2)
            })
            .sum();
        BoundCase {
            horizon: self.target.len(),
            samples: self.samples.len(),
            omega,
            loss_total: loss / s,
            bound,
            loss_total_time_centred: loss_time / s,
        }
    }

    /// Random targets with predictions `target + bias + noise`; either term
    /// may be switched off.
    pub fn random<R: Rng + ?Sized>(horizon: usize, samples: usize, rng: &mut R) -> Self {
        let target: Vec<f64> = (0..horizon).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias_scale = if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.0..1.0) };
        let noise_scale = if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.0..2.0) };
        let bias: Vec<f64> = (0..horizon).map(|_| bias_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let samples = (0..samples)
            .map(|_| (0..horizon).map(|t| target[t] + bias[t] + noise_scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        PredictorEnsemble { target, samples }
    }
}

pub const BOUND_OMEGAS: [f64; 3] = [0.0, 1.0, 20.0];

#[derive(Debug, Clone, Serialize)]
pub struct LossBoundReport {
    pub ensembles: usize,
    pub cases: usize,
    pub min_slack: f64,
    pub passed: bool,
    /// Cases where the bound would fail if the regularizer were centred on
    /// the time mean instead of the per-step mean.
    pub time_centred_violations: usize,
}

/// `ensembles` random ensembles with `T ∈ 2..=10`, each evaluated at every
/// weight in [`BOUND_OMEGAS`].
pub fn check_loss_bound(ensembles: usize, seed: u64) -> LossBoundReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(ensembles * BOUND_OMEGAS.len());
    for _ in 0..ensembles {
        let horizon = rng.random_range(2..=10);
        let samples = rng.random_range(2..=40);
        let ens = PredictorEnsemble::random(horizon, samples, &mut rng);
        cases.extend(BOUND_OMEGAS.iter().map(|&w| ens.evaluate(w)));
    }
    let min_slack = cases.iter().map(BoundCase::slack).fold(f64::INFINITY, f64::min);
    LossBoundReport {
        ensembles,
        cases: cases.len(),
        min_slack,
        passed: min_slack >= -1e-9,
        time_centred_violations: cases.iter().filter(|c| c.loss_total_time_centred > c.bound + 1e-9).count(),
    }
}

// ---- width trend -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendVerdict {
    Pass,
    Fail,
    InsufficientSpan,
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthTrendReport {
    pub widths: Vec<usize>,
    pub inits: usize,
    pub variances: Vec<f64>,
    pub slope: Option<f64>,
    /// Bootstrap standard error of the slope.
    pub slope_std_error: Option<f64>,
    pub threshold: f64,
    pub verdict: TrendVerdict,
}

pub const WIDTH_INPUT_DIM: usize = 16;
pub const WIDTH_AGENTS: usize = 2;
pub const SLOPE_THRESHOLD: f64 = -0.5;
const BOOTSTRAP_RESAMPLES: usize = 200;

/// Fixed input `[1, 1, N, D]` shared by every initialization.
fn probe_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::uniform(vec![1, 1, WIDTH_AGENTS, WIDTH_INPUT_DIM], -1.0, 1.0, &mut rng)
}

/// Head output at the probe input for `inits` independent initializations
/// with every parameter drawn from N(0, 1/width).
pub fn init_predictions(width: usize, inits: usize, seed: u64, exec: Exec) -> Result<Vec<f64>> {
    let input = probe_input(seed);
    let out = exec.map_range(inits, |k| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((width as u64) << 32) | k as u64);
        let mut store = ParamStore::new();
        let head = CreditHead::new(&mut store, WIDTH_INPUT_DIM, width, HeadInit::Isotropic, &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(input.clone());
        let r = head.forward(&mut tape, &store, z)?;
        tape.value(r).item()
    });
    out.into_iter().collect()
}

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn log_log_slope(widths: &[usize], groups: &[Vec<f64>]) -> f64 {
    let x: Vec<f64> = widths.iter().map(|&w| (w as f64).ln()).collect();
    let y: Vec<f64> = groups.iter().map(|g| variance(g).ln()).collect();
    ols_slope(&x, &y)
}

pub fn check_width_variance_trend(widths: &[usize], inits: usize, seed: u64, exec: Exec) -> Result<WidthTrendReport> {
    let mut sorted = widths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.first() == Some(&0) || inits < 2 {
        return Err(Error::Config("widths must be positive and need at least two initializations".into()));
    }
    let spans_decade = sorted.len() >= 2 && sorted[sorted.len() - 1] >= 10 * sorted[0];
    let groups = sorted.iter().map(|&w| init_predictions(w, inits, seed, exec)).collect::<Result<Vec<_>>>()?;
    let variances: Vec<f64> = groups.iter().map(|g| variance(g)).collect();
    if !spans_decade {
        return Ok(WidthTrendReport {
            widths: sorted,
            inits,
            variances,
            slope: None,
            slope_std_error: None,
            threshold: SLOPE_THRESHOLD,
            verdict: TrendVerdict::InsufficientSpan,
        });
    }
    let slope = log_log_slope(&sorted, &groups);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007);
    let boots: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let resampled: Vec<Vec<f64>> = groups.iter().map(|g| (0..g.len()).map(|_| g[rng.random_range(0..g.len())]).collect()).collect();
            log_log_slope(&sorted, &resampled)
        })
        .collect();
    let se = variance(&boots).sqrt();
    Ok(WidthTrendReport {
        widths: sorted,
        inits,
        variances,
        slope: Some(slope),
        slope_std_error: Some(se),
        threshold: SLOPE_THRESHOLD,
        verdict: if slope <= SLOPE_THRESHOLD { TrendVerdict::Pass } else { TrendVerdict::Fail },
    })
}
