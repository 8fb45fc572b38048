//! Expected-reward sanity check: a softmax policy over fixed-reward arms
//! trained through the identical advantage/loss/update path as the full
//! adaptation loop.

use super::compute_advantages;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::p_at_temperature;
use crate::rng::rng_from_seed;
use rand::Rng;

/// Train a softmax policy over `arms` by sampling `n_samples` arms per
/// iteration, computing mean-baseline advantages, and descending the
/// policy-gradient loss at `lr`. Returns the final arm probabilities.
pub fn reinforce_bandit_check(
    arms: &[f64],
    lr: f64,
    iterations: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if arms.len() < 2 {
        return Err(Error::Input("bandit needs at least 2 arms".into()));
    }
    if n_samples < 2 {
        return Err(Error::Input("bandit needs at least 2 samples per step".into()));
    }
    let k = arms.len();
    let mut logits = Tensor::param(vec![1, k], vec![0.0; k]);
    let mut rng = rng_from_seed(seed);

    for _ in 0..iterations {
        let probs = p_at_temperature(&logits.data, 1.0);
        let mut picks = Vec::with_capacity(n_samples);
        let mut rewards = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut a = k - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    a = i;
                    break;
                }
            }
            picks.push(a);
            rewards.push(arms[a]);
        }

        // The sampled set is its own mean set here: there is no separate
        // baseline decode in the bandit.
        let (_, advantages) = compute_advantages(&rewards, true)?;

        // L = −(1/N) Σ adv_i · log π(a_i), built from the same primitives
        // as the full episode loss.
        let mut tape = Tape::new();
        let lid = tape.leaf(&logits);
        let rows = tape.gather_rows(lid, &vec![0usize; n_samples])?;
        let ls = tape.log_softmax_rows(rows)?;
        let chosen = tape.select_per_row(ls, &picks)?;
        let adv = tape.constant(vec![n_samples], advantages.clone());
        let weighted = tape.mul(chosen, adv)?;
        let total = tape.sum_all(weighted)?;
        let loss = tape.scale(total, -1.0 / n_samples as f64)?;
        tape.backward(loss)?;
        if let Some(g) = tape.grad(lid) {
            for (p, gi) in logits.data.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
    }
    Ok(p_at_temperature(&logits.data, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_arm_bandit_concentrates_on_the_best_arm() {
        let mut mean_best = 0.0;
        for seed in 0..20 {
            let p = reinforce_bandit_check(&[1.0, 0.0], 0.1, 500, 4, seed).unwrap();
            mean_best += p[0];
        }
        mean_best /= 20.0;
        assert!(mean_best > 0.9, "P(best arm) averaged {:.3}", mean_best);
    }

    #[test]
    fn equal_arms_stay_uniform() {
        let p = reinforce_bandit_check(&[0.5, 0.5, 0.5], 0.1, 500, 4, 7).unwrap();
        for &pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-6, "drifted to {:?}", p);
        }
    }

    #[test]
    fn best_arm_probability_is_monotone_on_average() {
        // 20-seed mean trajectory of P(best) must be non-decreasing
        // within a 0.02 noise tolerance.
        let checkpoints = [0usize, 50, 100, 200, 400];
        let mut means = Vec::new();
        for &iters in &checkpoints {
            let mut m = 0.0;
            for seed in 0..20 {
                let p = reinforce_bandit_check(&[1.0, 0.0], 0.1, iters, 4, 100 + seed).unwrap();
                m += p[0];
            }
            means.push(m / 20.0);
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 0.02, "trajectory regressed: {:?}", means);
        }
    }
}
