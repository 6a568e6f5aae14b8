//! Executable checks of the theory behind return-equivalent redistribution.

pub mod analysis;
pub mod posdp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use analysis::{
    check_loss_bound, check_uniform_infeasibility, check_width_variance_trend, uniform_infeasibility, InfeasibilityReport,
    LossBoundReport, PredictorEnsemble, TrendVerdict, WidthTrendReport,
};
pub use posdp::{
    check_return_equivalence, check_theorem_family, expected_return, monte_carlo_return, DecPosdpSpec, EquivalenceVerdict,
    JointPolicy, MonteCarloEstimate, TheoremReport,
};

use crate::error::Result;
use crate::exec::Exec;

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub theorem_instances: usize,
    pub monte_carlo_samples: usize,
    pub bound_ensembles: usize,
    pub widths: Vec<usize>,
    pub width_inits: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            theorem_instances: 100,
            monte_carlo_samples: 100_000,
            bound_ensembles: 1000,
            widths: vec![64, 256, 1024],
            width_inits: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplingCheck {
    pub exact: f64,
    pub estimate: MonteCarloEstimate,
    /// `|estimate − exact|` in standard errors.
    pub z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub return_equivalence: TheoremReport,
    pub uniform_infeasibility: InfeasibilityReport,
    pub loss_bound: LossBoundReport,
    pub width_variance: WidthTrendReport,
    pub sampling: SamplingCheck,
    pub passed: bool,
}

/// Enumeration against sampling on one random instance and policy.
pub fn sampling_check(samples: usize, seed: u64) -> Result<SamplingCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = DecPosdpSpec::random(2, 2, 2, 3, &mut rng)?;
    let policy = JointPolicy::random(&spec, &mut rng);
    let exact = expected_return(&spec, &policy)?;
    let estimate = monte_carlo_return(&spec, &policy, samples, &mut rng)?;
    let z = (estimate.mean - exact).abs() / estimate.std_error.max(f64::MIN_POSITIVE);
    Ok(SamplingCheck { exact, estimate, z, passed: z <= 3.0 })
}

pub fn run_all(cfg: &VerifyConfig, exec: Exec) -> Result<VerifyReport> {
    let return_equivalence = check_theorem_family(cfg.theorem_instances, cfg.seed, exec)?;
    let uniform_infeasibility = check_uniform_infeasibility()?;
    let loss_bound = check_loss_bound(cfg.bound_ensembles, cfg.seed);
    let width_variance = check_width_variance_trend(&cfg.widths, cfg.width_inits, cfg.seed, exec)?;
    let sampling = sampling_check(cfg.monte_carlo_samples, cfg.seed)?;
    let passed = return_equivalence.passed
        && !uniform_infeasibility.feasible
        && loss_bound.passed
        && width_variance.verdict == TrendVerdict::Pass
        && sampling.passed;
    Ok(VerifyReport { return_equivalence, uniform_infeasibility, loss_bound, width_variance, sampling, passed })
}
