use crate::agents::Agent;
use crate::env::Env;
use crate::error::Result;
use crate::nn::SeededRng;

/// Evaluation summary over a set of episodes: undiscounted mean return, a
/// bootstrap confidence interval over episodes, and the fraction of episodes
/// collecting any positive reward.
#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub mean_return: f64,
    pub return_lo: f64,
    pub return_hi: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Deterministic protocol: acting uses z = 0 through the flow sampler (and
/// the edit-policy mean); per-episode RNG streams only drive environment
/// resets, so changing the episode count never perturbs training randomness.
pub fn evaluate(agent: &Agent, env: &mut dyn Env, episodes: usize, seed: u64) -> Result<EvalResult> {
    assert!(episodes >= 1, "evaluate needs at least one episode");
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    for ep in 0..episodes {
        let mut rng = SeededRng::indexed(seed, "eval-episode", ep as u64);
        let mut s = env.reset(&mut rng);
        let mut total = 0.0;
        let mut success = false;
        loop {
            let a = agent.act(&s, &mut rng, true)?;
            let out = env.step(&a);
            total += out.reward;
            if out.reward > 0.0 {
                success = true;
            }
            s = out.next;
            if out.done {
                break;
            }
        }
        returns.push(total);
        successes += usize::from(success);
    }

    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let (lo, hi) = bootstrap_ci(&returns, seed);
    Ok(EvalResult {
        mean_return: mean,
        return_lo: lo,
        return_hi: hi,
        success_rate: successes as f64 / episodes as f64,
        episodes,
    })
}

/// Percentile bootstrap (2.5/97.5) over episode returns; collapses to the
/// point value for a single episode.
fn bootstrap_ci(returns: &[f64], seed: u64) -> (f64, f64) {
    let n = returns.len();
    if n == 1 {
        return (returns[0], returns[0]);
    }
    let mut rng = SeededRng::named(seed, "eval-bootstrap");
    let resamples = 200;
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += returns[rng.index(n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let lo = means[(resamples as f64 * 0.025).floor() as usize];
    let hi = means[((resamples as f64 * 0.975).ceil() as usize).min(resamples - 1)];
    (lo, hi)
}
