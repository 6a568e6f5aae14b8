//! The complete credit model: attention stack followed by the credit head.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;

use crate::attention::{AttentionStack, AttentionTrace, ModelConfig};
use crate::credit::{CreditHead, HeadInit, RedistributedReward};
use crate::error::{Error, Result};
use crate::ndtensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct CreditModel {
    pub params: ParamStore,
    pub stack: AttentionStack,
    pub head: CreditHead,
}

impl CreditModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let stack = AttentionStack::new(&mut params, config, rng)?;
        let head = CreditHead::new(&mut params, config.embed_dim, config.head_hidden, HeadInit::FanIn, rng);
        Ok(CreditModel { params, stack, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.stack.config
    }

    /// Records the forward pass for `obs: [B, T, N, obs_dim]`, returning
    /// predicted rewards `[B, T]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        obs: Var,
        group_ids: Option<&[usize]>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let z = self.stack.forward(tape, &self.params, obs, group_ids, trace)?;
        if tape.shape(z)[2] == 0 {
            return Err(Error::Contract("credit head needs at least one agent".into()));
        }
        self.head.forward(tape, &self.params, z)
    }

    /// Predicted rewards for a batch of observation tensors, no gradients.
    pub fn predict_tensor(&self, obs: &Tensor, group_ids: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let r = self.forward(&mut tape, o, group_ids, None)?;
        Ok(tape.value(r).clone())
    }

    /// Predicted rewards for one episode `obs: [T, N, obs_dim]`.
    pub fn predict_episode(&self, episode_id: u64, obs: &Tensor, group_ids: Option<&[usize]>) -> Result<RedistributedReward> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs.shape());
        let r = self.predict_tensor(&obs.reshape(shape)?, group_ids)?;
        Ok(RedistributedReward { episode_id, values: r.into_data() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| write_checkpoint(&self.params, w))
    }

    /// Builds a model for `config` and overwrites its parameters from `path`.
    pub fn load<R: Rng + ?Sized>(config: &ModelConfig, path: &Path, rng: &mut R) -> Result<Self> {
        let mut model = Self::new(config, rng)?;
        let stored = read_checkpoint(BufReader::new(File::open(path)?))?;
        model.params.load_from(&stored)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { obs_dim: 3, embed_dim: 8, heads: 2, depth: 2, max_len: 8, head_hidden: 6, ..Default::default() }
    }

    #[test]
    fn save_load_reproduces_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CreditModel::new(&cfg(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = CreditModel::load(&cfg(), &path, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let obs = Tensor::randn(vec![5, 2, 3], 1.0, &mut rng);
        let a = model.predict_episode(0, &obs, None).unwrap();
        let b = loaded.predict_episode(0, &obs, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 5);
    }

    #[test]
    fn load_rejects_mismatched_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = CreditModel::new(&cfg(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let mut other = cfg();
        other.embed_dim = 4;
        assert!(matches!(CreditModel::load(&other, &path, &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn same_seed_same_output_bitwise() {
        let obs = Tensor::randn(vec![4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let run = || {
            let m = CreditModel::new(&cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            m.predict_episode(0, &obs, None).unwrap().values
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
