use arel::attention::{causal_mask_matrix, ModelConfig};
use arel::credit::{regression_loss, variance_loss};
use arel::learner::{discounted_returns, TabularPolicy};
use arel::model::CreditModel;
use arel::ndtensor::{Tape, Tensor};
use arel::redistribution::{mix_rewards, ExperienceBuffer, Trajectory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn episode(id: u64, t: usize) -> Trajectory {
    Trajectory {
        episode_id: id,
        seed: id,
        n_agents: 1,
        obs_dim: 1,
        observations: vec![0.5; t],
        actions: vec![vec![0]; t],
        episodic_reward: 0.0,
        hidden_rewards: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(len in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn(vec![2, len, len], scale, &mut rng));
        let p = tape.softmax_lastdim(x, Some(&causal_mask_matrix(len))).unwrap();
        let v = tape.value(p).data();
        for (r, row) in v.chunks(len).enumerate() {
            let t = r % len;
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[t + 1..].iter().all(|&w| w == 0.0));
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn predictions_ignore_agent_order(n in 2usize..5, t in 1usize..6, rot in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { obs_dim: 3, embed_dim: 8, heads: 2, depth: 1, max_len: 6, head_hidden: 8, ff_mult: 1, ..ModelConfig::default() };
        let model = CreditModel::new(&cfg, &mut rng).unwrap();
        let obs = Tensor::randn(vec![1, t, n, 3], 1.0, &mut rng);
        let rotated: Vec<f64> = obs
            .data()
            .chunks(n * 3)
            .flat_map(|step| (0..n).flat_map(move |i| step[((i + rot) % n) * 3..((i + rot) % n) * 3 + 3].to_vec()))
            .collect();
        let a = model.predict_tensor(&obs, None).unwrap();
        let b = model.predict_tensor(&Tensor::new(vec![1, t, n, 3], rotated).unwrap(), None).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn buffer_keeps_the_newest_episodes(capacity in 1usize..20, count in 0usize..60) {
        let mut buf = ExperienceBuffer::new(capacity).unwrap();
        for id in 0..count as u64 {
            buf.store(episode(id, 2)).unwrap();
        }
        let ids: Vec<u64> = buf.iter().map(|e| e.episode_id).collect();
        let expected: Vec<u64> = (count.saturating_sub(capacity) as u64..count as u64).collect();
        prop_assert_eq!(ids, expected);
    }

    #[test]
    fn mixed_rewards_conserve_the_blend(r_hat in prop::collection::vec(-5.0f64..5.0, 1..30), big_r in -10.0f64..10.0, alpha in 0.0f64..=1.0) {
        let mixed = mix_rewards(&r_hat, big_r, alpha).unwrap();
        let expected = alpha * r_hat.iter().sum::<f64>() + (1.0 - alpha) * big_r;
        prop_assert!((mixed.iter().sum::<f64>() - expected).abs() < 1e-9);
        for (m, r) in mixed[..r_hat.len() - 1].iter().zip(&r_hat) {
            prop_assert_eq!(*m, alpha * r);
        }
    }

    #[test]
    fn policy_probabilities_are_distributions(prefs in prop::array::uniform6(-30.0f64..30.0), eps in 0.0f64..=1.0) {
        let mut policy = TabularPolicy::new(true);
        let key = vec![1, 2];
        policy.set_preferences(key.clone(), prefs);
        for p in [policy.probs(&key), policy.behavior_probs(&key, eps)] {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
        let floor = eps / 6.0;
        prop_assert!(policy.behavior_probs(&key, eps).iter().all(|&x| x >= floor - 1e-15));
    }

    #[test]
    fn constant_credit_is_variance_free(value in -3.0f64..3.0, t in 1usize..20) {
        let r = vec![value; t];
        prop_assert!(variance_loss(&r).unwrap() < 1e-24);
        let total = value * t as f64;
        prop_assert!(regression_loss(&r, total).unwrap() < 1e-20);
    }

    #[test]
    fn undiscounted_returns_are_suffix_sums(rewards in prop::collection::vec(-2.0f64..2.0, 1..25)) {
        let g = discounted_returns(&rewards, 1.0);
        for t in 0..rewards.len() {
            prop_assert!((g[t] - rewards[t..].iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}
