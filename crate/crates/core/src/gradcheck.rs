//! Central finite-difference checks of every differentiable operation and of
//! the composed attention and credit stack.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AgentAttentionMode, ModelConfig};
use crate::credit::{total_loss_on_tape, LossTargets, Regularizer};
use crate::error::Result;
use crate::exec::Exec;
use crate::model::CreditModel;
use crate::ndtensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Largest number of coordinates perturbed per instance.
const MAX_COORDS: usize = 160;

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub op: String,
    pub instance: usize,
    pub coords: usize,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over the
/// checked coordinates; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares backward against central differences of the scalar produced by
/// `f` with respect to every parameter in `store`, checking at most
/// `max_coords` randomly chosen coordinates. Returns (coords, rel error).
pub fn check_store<F, R>(store: &ParamStore, f: F, step: f64, max_coords: usize, rng: &mut R) -> Result<(usize, f64)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward_into(loss, &mut work)?;

    let coords: Vec<(ParamId, usize)> = work
        .ids()
        .flat_map(|id| (0..work.value(id).len()).map(move |k| (id, k)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut c = sample(rng, coords.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        t.value(l).item()
    };
    let mut analytic = Vec::with_capacity(chosen.len());
    let mut numeric = Vec::with_capacity(chosen.len());
    for &c in &chosen {
        let (id, k) = coords[c];
        analytic.push(work.get(id).grad.as_ref().map_or(0.0, |g| g.data()[k]));
        let orig = work.value(id).data()[k];
        work.get_mut(id).value.data_mut()[k] = orig + step;
        let up = eval(&work)?;
        work.get_mut(id).value.data_mut()[k] = orig - step;
        let down = eval(&work)?;
        work.get_mut(id).value.data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    Ok((chosen.len(), relative_error(&analytic, &numeric)))
}

/// Values bounded away from zero so ReLU and |x| are smooth at `x ± h`.
fn away_from_zero<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 - rng.random::<f64>() } else { 0.05 + rng.random::<f64>() };
        }
    }
    t
}

fn dim<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(1..=4)
}

/// Random inputs for one operation plus the closure that applies it and
/// contracts the result against fixed random weights.
struct OpCase {
    store: ParamStore,
    ids: Vec<ParamId>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>,
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<OpCase> {
    let mut inputs: Vec<Tensor> = Vec::new();
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    let build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync> = match name {
        "add" | "sub" | "mul" => {
            inputs.push(Tensor::randn(vec![a, b, c], 1.0, rng));
            // Second operand broadcasts along a random subset of axes.
            let shape = vec![if rng.random() { a } else { 1 }, if rng.random() { b } else { 1 }, c];
            inputs.push(Tensor::randn(shape, 1.0, rng));
            let name = name.to_string();
            Box::new(move |t, v| match name.as_str() {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            })
        }
        "scale" => {
            inputs.push(Tensor::randn(vec![a, b], 1.0, rng));
            let k = rng.random_range(-2.0..2.0);
            Box::new(move |t, v| t.scale(v[0], k))
        }
        "add_scalar" => {
            inputs.push(Tensor::randn(vec![a, b], 1.0, rng));
            let k = rng.random_range(-2.0..2.0);
            Box::new(move |t, v| t.add_scalar(v[0], k))
        }
        "relu" => {
            inputs.push(away_from_zero(vec![a, b, c], rng));
            Box::new(|t, v| t.relu(v[0]))
        }
        "abs" => {
            inputs.push(away_from_zero(vec![a, b, c], rng));
            Box::new(|t, v| t.abs(v[0]))
        }
        "square" => {
            inputs.push(Tensor::randn(vec![a, b], 1.0, rng));
            Box::new(|t, v| t.square(v[0]))
        }
        "matmul" => {
            let (p, q, r) = (dim(rng), dim(rng), dim(rng));
            match rng.random_range(0..3) {
                0 => {
                    inputs.push(Tensor::randn(vec![a, p, q], 1.0, rng));
                    inputs.push(Tensor::randn(vec![q, r], 1.0, rng));
                }
                1 => {
                    inputs.push(Tensor::randn(vec![a, p, q], 1.0, rng));
                    inputs.push(Tensor::randn(vec![a, q, r], 1.0, rng));
                }
                _ => {
                    inputs.push(Tensor::randn(vec![a, 1, p, q], 1.0, rng));
                    inputs.push(Tensor::randn(vec![b, q, r], 1.0, rng));
                }
            }
            Box::new(|t, v| t.matmul(v[0], v[1]))
        }
        "permute" => {
            inputs.push(Tensor::randn(vec![a, b, c], 1.0, rng));
            let perms = [[0, 2, 1], [1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]];
            let axes = perms[rng.random_range(0..perms.len())];
            Box::new(move |t, v| t.permute(v[0], &axes))
        }
        "transpose" => {
            inputs.push(Tensor::randn(vec![a, b, c], 1.0, rng));
            Box::new(|t, v| t.transpose_last_two(v[0]))
        }
        "reshape" => {
            inputs.push(Tensor::randn(vec![a, b, c], 1.0, rng));
            let shape = [a * b, c];
            Box::new(move |t, v| t.reshape(v[0], &shape))
        }
        "sum" => {
            inputs.push(Tensor::randn(vec![a, b], 1.0, rng));
            Box::new(|t, v| t.sum(v[0]))
        }
        "mean" => {
            inputs.push(Tensor::randn(vec![a, b], 1.0, rng));
            Box::new(|t, v| t.mean(v[0]))
        }
        "sum_axis" | "mean_axis" => {
            inputs.push(Tensor::randn(vec![a, b, c], 1.0, rng));
            let axis = rng.random_range(0..3);
            if name == "sum_axis" {
                Box::new(move |t, v| t.sum_axis(v[0], axis))
            } else {
                Box::new(move |t, v| t.mean_axis(v[0], axis))
            }
        }
        "softmax" => {
            let n = dim(rng) + 1;
            inputs.push(Tensor::randn(vec![a, n, n], 1.0, rng));
            let mask = rng.random::<bool>().then(|| crate::attention::causal_mask_matrix(n));
            Box::new(move |t, v| t.softmax_lastdim(v[0], mask.as_ref()))
        }
        "layer_norm" => {
            let d = dim(rng) + 1;
            inputs.push(Tensor::randn(vec![a, b, d], 1.0, rng));
            inputs.push(Tensor::randn(vec![d], 1.0, rng));
            inputs.push(Tensor::randn(vec![d], 1.0, rng));
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]))
        }
        "narrow" => {
            let n = dim(rng) + 1;
            inputs.push(Tensor::randn(vec![a, n, b], 1.0, rng));
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            Box::new(move |t, v| t.narrow(v[0], 1, start, len))
        }
        "gather_rows" => {
            let g = dim(rng);
            inputs.push(Tensor::randn(vec![g, b], 1.0, rng));
            let ids: Vec<usize> = (0..a + 1).map(|_| rng.random_range(0..g)).collect();
            Box::new(move |t, v| t.gather_rows(v[0], &ids))
        }
        other => return Err(crate::Error::Config(format!("unknown operation {other}"))),
    };
    let mut store = ParamStore::new();
    let ids = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect();
    Ok(OpCase { store, ids, build })
}

pub const OPS: [&str; 19] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "abs",
    "square",
    "matmul",
    "permute",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "softmax",
    "layer_norm",
    "narrow",
];

/// Every op in [`OPS`] plus `gather_rows`.
pub fn op_names() -> Vec<&'static str> {
    let mut v = OPS.to_vec();
    v.push("gather_rows");
    v
}

fn run_op(name: &str, instance: usize, seed: u64, step: f64, tol: f64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let case = op_case(name, &mut rng)?;
    // Fixed random contraction weights turn any output into a scalar.
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = case.ids.iter().map(|&id| t.param(&case.store, id)).collect();
        let out = (case.build)(&mut t, &vars)?;
        Tensor::randn(t.shape(out).to_vec(), 1.0, &mut rng)
    };
    let f = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
        let vars: Vec<Var> = case.ids.iter().map(|&id| t.param(s, id)).collect();
        let out = (case.build)(t, &vars)?;
        let w = t.constant(probe.clone());
        let prod = t.mul(out, w)?;
        t.sum(prod)
    };
    let (coords, rel_error) = check_store(&case.store, f, step, MAX_COORDS, &mut rng)?;
    Ok(CaseResult { op: name.to_string(), instance, coords, rel_error, passed: rel_error <= tol })
}

/// Small model configuration for the composite check of instance `i`.
fn stack_config(i: usize) -> ModelConfig {
    ModelConfig {
        obs_dim: if i % 5 == 4 { 104 } else { 3 },
        embed_dim: 8,
        heads: 2,
        depth: 1 + i % 3,
        max_len: 6,
        groups: if i % 2 == 0 { Some(2) } else { None },
        agent_attention: if i % 4 == 3 { AgentAttentionMode::Uniform } else { AgentAttentionMode::Full },
        ff_mult: 2,
        head_hidden: 6,
    }
}

fn run_stack(instance: usize, seed: u64, step: f64, tol: f64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5157_ac4b) ^ instance as u64);
    let cfg = stack_config(instance);
    let model = CreditModel::new(&cfg, &mut rng)?;
    let (b, t, n) = (2, rng.random_range(2..=5), rng.random_range(1..=3));
    let obs = Tensor::randn(vec![b, t, n, cfg.obs_dim], 1.0, &mut rng);
    let groups: Option<Vec<usize>> = cfg.groups.map(|g| (0..n).map(|i| i % g).collect());
    let lengths = [t, rng.random_range(1..=t)];
    let episodic: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets = LossTargets::new(&episodic, &lengths, t)?;
    let kind = [Regularizer::Variance, Regularizer::L1, Regularizer::L2][instance % 3];
    let omega = [0.0, 1.0, 20.0][(instance / 3) % 3];
    let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
        let o = tape.constant(obs.clone());
        let z = model.stack.forward(tape, s, o, groups.as_deref(), None)?;
        let r_hat = model.head.forward(tape, s, z)?;
        Ok(total_loss_on_tape(tape, r_hat, &targets, kind, omega)?.total)
    };
    let (coords, rel_error) = check_store(&model.params, f, step, MAX_COORDS, &mut rng)?;
    Ok(CaseResult { op: "attention_credit_stack".into(), instance, coords, rel_error, passed: rel_error <= tol })
}

/// Runs `instances_per_op` random instances of every op and of the full
/// model loss.
pub fn run_suite(instances_per_op: usize, seed: u64, exec: Exec) -> Result<GradCheckReport> {
    run_suite_with(instances_per_op, seed, exec, DEFAULT_STEP, DEFAULT_TOLERANCE)
}

pub fn run_suite_with(instances_per_op: usize, seed: u64, exec: Exec, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut jobs: Vec<(Option<&str>, usize)> = Vec::new();
    for name in op_names() {
        jobs.extend((0..instances_per_op).map(|i| (Some(name), i)));
    }
    jobs.extend((0..instances_per_op).map(|i| (None, i)));
    let results = exec.map(&jobs, |&(name, i)| match name {
        Some(op) => run_op(op, i, seed, step, tol),
        None => run_stack(i, seed, step, tol),
    });
    let cases = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { step, tolerance: tol, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_zero_for_identical_vectors() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_checks_every_coordinate() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let y = t.square(x)?;
            t.sum(y)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, err) = check_store(&store, f, 1e-5, 10, &mut rng).unwrap();
        assert_eq!(n, 3);
        assert!(err < 1e-8);
    }

    #[test]
    fn every_op_passes_one_instance() {
        for name in op_names() {
            let r = run_op(name, 0, 7, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
            assert!(r.passed, "{name}: {}", r.rel_error);
        }
    }

    #[test]
    fn composite_stack_passes() {
        let r = run_stack(0, 3, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(r.passed, "{}", r.rel_error);
        assert!(r.coords > 0);
    }
}
