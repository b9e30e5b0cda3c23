//! PPO on a two-armed contextual bandit, the smallest end-to-end check of
//! the learner.

use airground::neural::{ActorCritic, ModelConfig, Tensor};
use airground::ppo::{BanditEnv, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig { d_raw: 2, stack_len: 1, d_model: 8, layers: 1, heads: 2, d_ff: 8, d_out: 8, n_actions: 2, use_msce: true, use_stin: true };
    let model = ActorCritic::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut t = Trainer::new(model, TrainConfig { rollout_len: 32, minibatch: 16, ..TrainConfig::default() }, |_| Ok(BanditEnv::default()))?;
    let states = Tensor::from_vec(2, 2, [BanditEnv::encode(0), BanditEnv::encode(1)].concat())?;
    for round in 0..5 {
        t.train(40, None)?;
        let (p, _) = t.model.evaluate(&states)?;
        println!("after {:>3} updates: P(correct arm) = {:.3} / {:.3}", 40 * (round + 1), p[0][0], p[1][1]);
    }
    Ok(())
}
