use arel::attention::ModelConfig;
use arel::envs::EnvSpec;
use arel::exec::Exec;
use arel::experiments::{recovery_over_seeds, RecoveryConfig};
use arel::gradcheck;
use arel::learner::{run_experiment, ExperimentConfig, Strategy};
use arel::redistribution::CreditConfig;
use arel::verify;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];
const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn tiny_model() -> ModelConfig {
    ModelConfig { embed_dim: 8, heads: 2, head_hidden: 8, ff_mult: 1, ..ModelConfig::default() }
}

fn seeds(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        env: EnvSpec { grid: 5, horizon: 10, fixed_layout: true, ..EnvSpec::two_button() },
        episodes: 100,
        eval_every: 50,
        eval_episodes: 10,
        credit: CreditConfig { update_every: 25, batches: 4, batch_size: 8, ..CreditConfig::default() },
        model: tiny_model(),
        ..ExperimentConfig::default()
    };
    let mut g = c.benchmark_group("policy_seeds");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| run_experiment(&cfg, Strategy::Arel, &SEEDS, e).unwrap())
        });
    }
    g.finish();
}

fn recovery(c: &mut Criterion) {
    let cfg = RecoveryConfig { model: tiny_model(), train_episodes: 64, test_episodes: 16, steps: 20, batch_size: 8, ..RecoveryConfig::default() };
    let mut g = c.benchmark_group("synthetic_recovery");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| b.iter(|| recovery_over_seeds(&cfg, &SEEDS, e).unwrap()));
    }
    g.finish();
}

fn checks(c: &mut Criterion) {
    let mut g = c.benchmark_group("checks");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::new("gradcheck_suite", name), &exec, |b, &e| b.iter(|| gradcheck::run_suite(1, 0, e).unwrap()));
        g.bench_with_input(BenchmarkId::new("theorem_family", name), &exec, |b, &e| {
            b.iter(|| verify::check_theorem_family(10, 0, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("width_trend", name), &exec, |b, &e| {
            b.iter(|| verify::check_width_variance_trend(&[16, 64, 256], 10, 0, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, seeds, recovery, checks);
criterion_main!(benches);
