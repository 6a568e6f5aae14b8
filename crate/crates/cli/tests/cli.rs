use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
task = "navigation"
n_agents = 2
horizon = 10
episodes = 200
eval_every = 50
eval_episodes = 10
update_every = 50
batches = 5
embed_dim = 16
heads = 2
head_hidden = 16
seeds = [0]
output_dir = "smoke"
"#;

fn arel(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arel")).env("AREL_OUTPUT_ROOT", root).current_dir(root).args(args).output().unwrap()
}

fn write(root: &Path, name: &str, text: &str) -> String {
    let p = root.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_a_reproducible_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let start = std::time::Instant::now();
    let o = arel(dir.path(), &["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    let run = dir.path().join("smoke");
    for f in ["manifest.json", "config.toml", "arel_seed0.csv", "arel_aggregate.csv", "credit_seed0.ckpt", "credit_loss_seed0.csv", "episodes_seed0.jsonl", "policy_seed0.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    let first = std::fs::read(run.join("arel_seed0.csv")).unwrap();
    let ckpt = std::fs::read(run.join("credit_seed0.ckpt")).unwrap();

    // the stored config alone reproduces the run
    let stored = run.join("config.toml");
    let o = arel(dir.path(), &["train", "--config", stored.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(run.join("arel_seed0.csv")).unwrap(), first);
    assert_eq!(std::fs::read(run.join("credit_seed0.ckpt")).unwrap(), ckpt);
    let leftovers = std::fs::read_dir(&run).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp")).count();
    assert_eq!(leftovers, 0);
}

#[test]
fn parallel_seeds_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMOKE.replace("seeds = [0]", "seeds = [1, 2]").replace("\"smoke\"", "\"seq\"");
    let cfg = write(dir.path(), "seq.toml", &text);
    assert!(arel(dir.path(), &["train", "--config", &cfg]).status.success());
    let cfg = write(dir.path(), "par.toml", &text.replace("\"seq\"", "\"par\""));
    assert!(arel(dir.path(), &["train", "--config", &cfg, "--parallel-seeds"]).status.success());
    for f in ["arel_seed1.csv", "arel_seed2.csv", "arel_aggregate.csv"] {
        assert_eq!(std::fs::read(dir.path().join("seq").join(f)).unwrap(), std::fs::read(dir.path().join("par").join(f)).unwrap());
    }
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "alpha = 1.5\n");
    let o = arel(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
    let cfg = write(dir.path(), "typo.toml", "omgea = 1.0\n");
    assert_eq!(arel(dir.path(), &["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "boom.toml", &format!("{SMOKE}credit_lr = 1e200\n"));
    let o = arel(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_and_redistribute_use_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    assert!(arel(dir.path(), &["train", "--config", &cfg]).status.success());
    let run = dir.path().join("smoke");

    let policy = run.join("policy_seed0.json");
    let a = arel(dir.path(), &["eval", "--config", &cfg, "--policy", policy.to_str().unwrap(), "--seed", "4"]);
    let b = arel(dir.path(), &["eval", "--config", &cfg, "--policy", policy.to_str().unwrap(), "--seed", "4"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(report["success_rate"].is_number());

    let ckpt = run.join("credit_seed0.ckpt");
    let eps = run.join("episodes_seed0.jsonl");
    let o = arel(dir.path(), &["redistribute", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", eps.to_str().unwrap(), "--out", "r.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("episode_id,t,r_hat,r_hat_normalized_0_1,true_reward"));
    let unit: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(unit.len(), 200 * 10);
    assert!(unit.iter().all(|u| (0.0..=1.0).contains(u)));

    // a three-agent config expects wider observations than the stored episodes
    let other = write(dir.path(), "three.toml", &SMOKE.replace("n_agents = 2", "n_agents = 3"));
    let o = arel(dir.path(), &["redistribute", "--config", &other, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", eps.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn verify_and_gradcheck_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = arel(dir.path(), &["verify", "--quick", "--out", "verify.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    for key in ["return_equivalence", "uniform_infeasibility", "loss_bound", "width_variance"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["passed"], true);

    let o = arel(dir.path(), &["gradcheck", "--instances", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["cases"].as_array().unwrap().len() >= 20);
}
