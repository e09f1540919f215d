use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::networks::Policy;
use crate::error::{Error, Result};
use crate::trajdata::EnvSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    /// Population standard deviation across episodes.
    pub std_return: f64,
    /// Normalized score of the mean return.
    pub normalized_score: f64,
    pub success_rate: f64,
    pub returns: Vec<f64>,
}

/// Rolls out `n_episodes` in lockstep. Episode `i` draws its reset, dynamics
/// and policy noise from stream `i` of a generator seeded with `seed`, so the
/// result does not depend on batching.
pub fn evaluate_policy<P: Policy + ?Sized>(
    env: EnvSpec,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n_episodes)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut envs: Vec<_> = (0..n_episodes).map(|_| env.make()).collect();
    let ds = env.state_dim();
    let mut states = Array2::<f32>::zeros((n_episodes, ds));
    for (i, (e, r)) in envs.iter_mut().zip(rngs.iter_mut()).enumerate() {
        let s = e.reset(r);
        states.row_mut(i).assign(&ndarray::ArrayView1::from(&s[..]));
    }
    let mut returns = vec![0.0f64; n_episodes];
    let mut done = vec![false; n_episodes];
    for _ in 0..env.episode_len() {
        let actions = policy.act_batch(&states, &mut rngs)?;
        if actions.dim() != (n_episodes, env.action_dim()) {
            return Err(Error::Shape {
                layer: "policy".into(),
                expected: format!("[{n_episodes}, {}]", env.action_dim()),
                got: format!("{:?}", actions.shape()),
            });
        }
        for i in 0..n_episodes {
            if done[i] {
                continue;
            }
            let a: Vec<f32> = actions.row(i).to_vec();
            let out = envs[i].step(&a, &mut rngs[i]);
            returns[i] += out.reward;
            states
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&out.next_state[..]));
            done[i] = out.terminal;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    let n = n_episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let wins = envs.iter().filter(|e| e.success()).count();
    Ok(EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
        normalized_score: env.normalized_score(mean),
        success_rate: wins as f64 / n,
        returns,
    })
}
