mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arel::envs::N_ACTIONS;
use arel::exec::Exec;
use arel::gradcheck;
use arel::io::write_atomic;
use arel::learner::{self, SeedRun, TabularPolicy};
use arel::model::CreditModel;
use arel::ndtensor::param::CHECKPOINT_VERSION;
use arel::redistribution::{CreditTrainer, ExperienceBuffer, BUFFER_SCHEMA_VERSION};
use arel::verify::{self, VerifyConfig};
use arel::{credit, Error};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "arel", version, about = "Attention-based reward redistribution experiments")]
struct Cli {
    /// Root directory that relative output paths resolve against.
    #[arg(long, global = true, env = "AREL_OUTPUT_ROOT", default_value = ".")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train policies (and credit models) for every configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run seeds on separate threads.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Greedy evaluation of a saved policy.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Per-step rewards predicted by a saved credit model.
    Redistribute {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Line-delimited JSON episodes.
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the theory checks and emit a JSON report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fewer samples per check, for smoke runs.
        #[arg(long)]
        quick: bool,
    },
    /// Finite-difference gradient checks of every operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Error(Error::Config(_) | Error::Validation(_)) => 2,
            Failure::Error(Error::Numeric(_)) => 3,
            Failure::Error(_) => 1,
            Failure::Verification(_) => 4,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.output_root.clone();
    let result = match cli.command {
        Command::Train { cfg, parallel_seeds } => train(&root, &cfg, parallel_seeds),
        Command::Eval { cfg, policy, episodes } => eval(&cfg, &policy, episodes),
        Command::Redistribute { cfg, checkpoint, episodes, out } => redistribute(&root, &cfg, &checkpoint, &episodes, out),
        Command::Verify { seed, out, quick } => run_verify(&root, seed, out, quick),
        Command::Gradcheck { seed, instances, out } => run_gradcheck(&root, seed, instances, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Error(e) => eprintln!("error: {e}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        Ok(())
    })
}

fn emit<T: Serialize>(root: &Path, out: Option<PathBuf>, value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(p) = out {
        write_json(&root.join(p), value)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seeds: &'a [u64],
    strategy: &'static str,
    arel_version: &'static str,
    checkpoint_format_version: u8,
    buffer_schema_version: u32,
    parallel_seeds: bool,
}

fn train(root: &Path, args: &ConfigArgs, parallel_seeds: bool) -> CmdResult {
    let cfg = load_config(args)?;
    let dir = root.join(&cfg.output_dir);
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    let exp = cfg.experiment();
    let exec = if parallel_seeds { Exec::best() } else { Exec::Sequential };
    let runs: Vec<SeedRun> = exec
        .map(&cfg.seeds, |&s| learner::run_seed(&exp, cfg.strategy, s))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let name = cfg.strategy.name();
    for (seed, run) in cfg.seeds.iter().zip(&runs) {
        write_json(&dir.join(format!("policy_seed{seed}.json")), &run.policy)?;
        if let Some(trainer) = &run.credit {
            trainer.model.save(&dir.join(format!("credit_seed{seed}.ckpt")))?;
            write_atomic(&dir.join(format!("credit_loss_seed{seed}.csv")), |w| {
                use std::io::Write;
                writeln!(w, "step,loss_total")?;
                for (i, l) in run.credit_losses.iter().enumerate() {
                    writeln!(w, "{i},{l}")?;
                }
                Ok(())
            })?;
            run.buffer.save_jsonl(&dir.join(format!("episodes_seed{seed}.jsonl")))?;
        }
    }
    let curves: Vec<_> = runs.into_iter().map(|r| r.curve).collect();
    learner::write_curves(&dir, name, &curves)?;
    write_atomic(&dir.join("config.toml"), |w| {
        use std::io::Write;
        w.write_all(cfg.to_toml().as_bytes())?;
        Ok(())
    })?;
    let manifest = Manifest {
        config_sha256: cfg.hash(),
        seeds: &cfg.seeds,
        strategy: name,
        arel_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format_version: CHECKPOINT_VERSION,
        buffer_schema_version: BUFFER_SCHEMA_VERSION,
        parallel_seeds,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    if let Some(agg) = learner::aggregate(&curves).last() {
        println!("{name}: episode {} median success {:.3} median return {:.4}", agg.episode, agg.median_success, agg.median_return);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    seed: u64,
    episodes: usize,
    eval_return: f64,
    success_rate: f64,
}

fn eval(args: &ConfigArgs, policy_path: &Path, episodes: Option<usize>) -> CmdResult {
    let cfg = load_config(args)?;
    let text = std::fs::read_to_string(policy_path).map_err(Error::from)?;
    let policy: TabularPolicy = serde_json::from_str(&text).map_err(Error::from)?;
    let seed = cfg.seeds[0];
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    if episodes == 0 {
        return Err(Error::Config("episodes: must be positive".into()).into());
    }
    let (eval_return, success_rate) = learner::evaluate(&policy, &cfg.env_spec(), episodes, seed)?;
    println!("{}", serde_json::to_string_pretty(&EvalReport { seed, episodes, eval_return, success_rate }).map_err(Error::from)?);
    Ok(())
}

fn redistribute(root: &Path, args: &ConfigArgs, checkpoint: &Path, episodes: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(args)?;
    let exp = cfg.experiment();
    let model_cfg = exp.credit_model_config();
    let model = CreditModel::load(&model_cfg, checkpoint, &mut ChaCha8Rng::seed_from_u64(0))?;
    let trainer = CreditTrainer::new(model, exp.credit.lr, exp.credit.omega, exp.credit.regularizer)?.with_actions(N_ACTIONS);
    let buffer = ExperienceBuffer::load_jsonl(episodes, usize::MAX)?;
    let mut rows = Vec::with_capacity(buffer.len());
    for traj in buffer.iter() {
        if traj.obs_dim + N_ACTIONS != model_cfg.obs_dim || traj.len() > model_cfg.max_len {
            return Err(Error::Validation(format!(
                "episode {} has obs_dim {} and length {}; the model expects obs_dim {} and length ≤ {}",
                traj.episode_id,
                traj.obs_dim,
                traj.len(),
                model_cfg.obs_dim - N_ACTIONS,
                model_cfg.max_len
            ))
            .into());
        }
        let values = trainer.predict(traj)?;
        rows.push((credit::RedistributedReward { episode_id: traj.episode_id, values }, traj.hidden_rewards.clone()));
    }
    let path = root.join(out.unwrap_or_else(|| cfg.output_dir.join("redistributed.csv")));
    credit::write_rewards_csv(&path, &rows)?;
    println!("wrote {} episodes to {}", rows.len(), path.display());
    Ok(())
}

fn run_verify(root: &Path, seed: u64, out: Option<PathBuf>, quick: bool) -> CmdResult {
    let mut cfg = VerifyConfig { seed, ..VerifyConfig::default() };
    if quick {
        cfg.theorem_instances = 10;
        cfg.bound_ensembles = 100;
        cfg.width_inits = 50;
        cfg.monte_carlo_samples = 20_000;
    }
    let report = verify::run_all(&cfg, Exec::best())?;
    emit(root, out, &report)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification("one or more theory checks failed".into()))
    }
}

fn run_gradcheck(root: &Path, seed: u64, instances: usize, out: Option<PathBuf>) -> CmdResult {
    if instances == 0 {
        return Err(Error::Config("instances: must be positive".into()).into());
    }
    let report = gradcheck::run_suite(instances, seed, Exec::best())?;
    emit(root, out, &report)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} gradient checks exceeded tolerance", report.failures().count())))
    }
}
