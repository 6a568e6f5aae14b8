//! Agent-temporal attention: observation embedding, causally masked temporal
//! attention per agent, unmasked attention across agents per time step, and
//! the stacked composition of the two.
//!
//! Features flow through the stack as `[B, T, N, D]` tensors (batch, time,
//! agent, feature). Every sub-module is wrapped post-norm: attention, residual,
//! layer norm, a two-layer ReLU feed-forward, residual, layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{ParamId, ParamStore, Tape, Tensor, Var, MASK_LARGE};

/// Observations wider than this are first compressed to this many units.
pub const COMPRESS_WIDTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentAttentionMode {
    #[default]
    Full,
    /// Ablation: every agent attends to all agents with weight 1/N.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Longest episode the position table covers.
    pub max_len: usize,
    /// Number of agent groups; `None` disables the group embedding.
    pub groups: Option<usize>,
    pub agent_attention: AgentAttentionMode,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ff_mult: usize,
    /// Hidden width of both credit-head MLPs.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_dim: 1,
            embed_dim: 64,
            heads: 4,
            depth: 1,
            max_len: 25,
            groups: None,
            agent_attention: AgentAttentionMode::Full,
            ff_mult: 4,
            head_hidden: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.obs_dim == 0 || self.embed_dim == 0 || self.max_len == 0 || self.head_hidden == 0 || self.ff_mult == 0 {
            return bad("obs_dim, embed_dim, max_len, ff_mult and head_hidden must be positive".into());
        }
        if self.depth < 1 {
            return bad(format!("depth must be at least 1, got {}", self.depth));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("heads ({}) must divide embed_dim ({})", self.heads, self.embed_dim));
        }
        if self.groups == Some(0) {
            return bad("groups must be positive when set".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Additive mask row for query time `t`: slots `0..=t` are attendable.
pub fn causal_mask(t: usize, len: usize) -> Result<Vec<f64>> {
    if t >= len {
        return Err(Error::Contract(format!("time index {t} out of range for length {len}")));
    }
    Ok((0..len).map(|s| if s <= t { 0.0 } else { -MASK_LARGE }).collect())
}

/// The full `[len, len]` causal mask, one row per query time.
pub fn causal_mask_matrix(len: usize) -> Tensor {
    let data = (0..len)
        .flat_map(|t| (0..len).map(move |s| if s <= t { 0.0 } else { -MASK_LARGE }))
        .collect();
    Tensor::from_parts(vec![len, len], data)
}

/// Weight matrix drawn from N(0, 1/fan_in).
pub(crate) fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(vec![rows, cols], (1.0 / rows as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(d_in, d_out, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![d])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Query/key/value projections plus the post-norm transformer wrapping.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    /// Absent when the weights are fixed to uniform.
    pub w_query: Option<ParamId>,
    pub w_key: Option<ParamId>,
    pub w_value: ParamId,
    norm_attn: Norm,
    ff_in: Linear,
    ff_out: Linear,
    norm_ff: Norm,
}

impl AttentionSublayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, scored: bool, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let mut proj = |suffix: &str, rng: &mut R| scored.then(|| store.add(format!("{name}.{suffix}"), init_weight(d, d, rng)));
        let w_query = proj("w_query", rng);
        let w_key = proj("w_key", rng);
        AttentionSublayer {
            w_query,
            w_key,
            w_value: store.add(format!("{name}.w_value"), init_weight(d, d, rng)),
            norm_attn: Norm::new(store, &format!("{name}.norm_attn"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, d * cfg.ff_mult, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), d * cfg.ff_mult, d, rng),
            norm_ff: Norm::new(store, &format!("{name}.norm_ff"), d),
        }
    }

    /// Attends along axis 2 of `x: [B, S, L, D]` independently for every
    /// `(b, s)`. Returns the wrapped output and the head-resolved weights
    /// `[B, S, H, L, L]`.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        heads: usize,
        mask: Option<&Tensor>,
        uniform: bool,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let (b, s, l, d) = (shape[0], shape[1], shape[2], shape[3]);
        let dh = d / heads;
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, s, l, heads, dh])?;
            tape.permute(v, &[0, 1, 3, 2, 4])
        };
        let wv = tape.param(store, self.w_value);
        let value = tape.matmul(x, wv)?;
        let value = split(tape, value)?;
        let weights = if let (false, Some(wq), Some(wk)) = (uniform, self.w_query, self.w_key) {
            let wq = tape.param(store, wq);
            let wk = tape.param(store, wk);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let q = split(tape, q)?;
            let k = split(tape, k)?;
            let kt = tape.transpose_last_two(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            tape.softmax_lastdim(scores, mask)?
        } else {
            tape.constant(Tensor::full(vec![l, l], 1.0 / l as f64))
        };
        let attended = tape.matmul(weights, value)?;
        let attended = tape.permute(attended, &[0, 1, 3, 2, 4])?;
        let attended = tape.reshape(attended, &[b, s, l, d])?;
        let h = tape.add(x, attended)?;
        let h = self.norm_attn.forward(tape, store, h)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = tape.relu(f)?;
        let f = self.ff_out.forward(tape, store, f)?;
        let y = tape.add(h, f)?;
        let y = self.norm_ff.forward(tape, store, y)?;
        Ok((y, weights))
    }
}

/// One temporal sub-module followed by one agent sub-module.
#[derive(Debug, Clone)]
pub struct AgentTemporalBlock {
    pub temporal: AttentionSublayer,
    pub agent: AttentionSublayer,
}

/// Attention weights of every block for the first episode of a batch,
/// averaged over heads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Per block, `temporal[agent][query_t][key_t]`.
    pub temporal: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per block, `agent[t][query_agent][key_agent]`.
    pub agent: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    /// JSON with explicit axis labels.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "temporal": {
                "axes": ["block", "agent", "query_t", "key_t"],
                "weights": self.temporal,
            },
            "agent": {
                "axes": ["block", "t", "query_agent", "key_agent"],
                "weights": self.agent,
            },
        })
    }
}

/// Averages `[B, S, H, L, L]` weights over heads for batch entry 0.
fn head_mean(w: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = w.shape();
    let (ns, h, l) = if s.len() == 5 { (s[1], s[2], s[3]) } else { (1, 1, s[s.len() - 1]) };
    let d = w.data();
    (0..ns)
        .map(|si| {
            (0..l)
                .map(|q| {
                    (0..l)
                        .map(|k| {
                            if s.len() == 5 {
                                (0..h).map(|hh| d[((si * h + hh) * l + q) * l + k]).sum::<f64>() / h as f64
                            } else {
                                d[q * l + k]
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Observation embedding plus position and optional group tables.
#[derive(Debug, Clone)]
pub struct Embedding {
    compress: Option<Linear>,
    project: Linear,
    pub position: ParamId,
    pub group: Option<ParamId>,
}

impl Embedding {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (compress, d_in) = if cfg.obs_dim > COMPRESS_WIDTH {
            (Some(Linear::new(store, "embed.compress", cfg.obs_dim, COMPRESS_WIDTH, rng)), COMPRESS_WIDTH)
        } else {
            (None, cfg.obs_dim)
        };
        let project = Linear::new(store, "embed.project", d_in, cfg.embed_dim, rng);
        let position = store.add("embed.position", Tensor::randn(vec![cfg.max_len, cfg.embed_dim], 0.1, rng));
        let group = cfg
            .groups
            .map(|g| store.add("embed.group", Tensor::randn(vec![g, cfg.embed_dim], 0.1, rng)));
        Embedding { compress, project, position, group }
    }

    pub fn uses_compression(&self) -> bool {
        self.compress.is_some()
    }
}

/// Embedding followed by `depth` agent-temporal blocks.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub blocks: Vec<AgentTemporalBlock>,
}

impl AttentionStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embedding = Embedding::new(store, config, rng);
        let blocks = (0..config.depth)
            .map(|i| AgentTemporalBlock {
                temporal: AttentionSublayer::new(store, &format!("block{i}.temporal"), config, true, rng),
                agent: AttentionSublayer::new(
                    store,
                    &format!("block{i}.agent"),
                    config,
                    config.agent_attention == AgentAttentionMode::Full,
                    rng,
                ),
            })
            .collect();
        Ok(AttentionStack { config: config.clone(), embedding, blocks })
    }

    /// `obs: [B, T, N, obs_dim]` to features `[B, T, N, D]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, obs: Var, group_ids: Option<&[usize]>) -> Result<Var> {
        let shape = tape.shape(obs).to_vec();
        if shape.len() != 4 || shape[3] != self.config.obs_dim {
            return Err(Error::Dimension(format!(
                "observations must be [B, T, N, {}], got {shape:?}",
                self.config.obs_dim
            )));
        }
        let (t, n) = (shape[1], shape[2]);
        if t > self.config.max_len {
            return Err(Error::Config(format!("episode length {t} exceeds max_len {}", self.config.max_len)));
        }
        let mut x = obs;
        if let Some(c) = &self.embedding.compress {
            x = c.forward(tape, store, x)?;
            x = tape.relu(x)?;
        }
        let mut e = self.embedding.project.forward(tape, store, x)?;
        let pos = tape.param(store, self.embedding.position);
        let pos = tape.narrow(pos, 0, 0, t)?;
        let pos = tape.reshape(pos, &[t, 1, self.config.embed_dim])?;
        e = tape.add(e, pos)?;
        match (self.embedding.group, group_ids) {
            (Some(table), Some(ids)) => {
                if ids.len() != n {
                    return Err(Error::Dimension(format!("{} group ids for {n} agents", ids.len())));
                }
                let table = tape.param(store, table);
                let g = tape.gather_rows(table, ids)?;
                e = tape.add(e, g)?;
            }
            (Some(_), None) => return Err(Error::Config("model has a group embedding; group ids required".into())),
            (None, Some(_)) => return Err(Error::Config("group ids given but the model has no group embedding".into())),
            (None, None) => {}
        }
        Ok(e)
    }

    pub fn temporal_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        e: Var,
    ) -> Result<(Var, Var)> {
        let t = tape.shape(e)[1];
        let per_agent = tape.permute(e, &[0, 2, 1, 3])?;
        let mask = causal_mask_matrix(t);
        let (x, w) = self.blocks[block].temporal.forward(tape, store, per_agent, self.config.heads, Some(&mask), false)?;
        Ok((tape.permute(x, &[0, 2, 1, 3])?, w))
    }

    pub fn agent_attention(&self, tape: &mut Tape, store: &ParamStore, block: usize, x: Var) -> Result<(Var, Var)> {
        let uniform = self.config.agent_attention == AgentAttentionMode::Uniform;
        self.blocks[block].agent.forward(tape, store, x, self.config.heads, None, uniform)
    }

    /// Full stack: embed, then every block. Fills `trace` when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        group_ids: Option<&[usize]>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let mut z = self.embed(tape, store, obs, group_ids)?;
        for i in 0..self.blocks.len() {
            let (x, alpha) = self.temporal_attention(tape, store, i, z)?;
            let (next, beta) = self.agent_attention(tape, store, i, x)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.temporal.push(head_mean(tape.value(alpha)));
                let b = head_mean(tape.value(beta));
                // Uniform mode has one shared [N, N] matrix; repeat it per step.
                let steps = tape.shape(x)[1];
                tr.agent.push(if b.len() == 1 && steps > 1 { vec![b[0].clone(); steps] } else { b });
            }
            z = next;
        }
        Ok(z)
    }
}
