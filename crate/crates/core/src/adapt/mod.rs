//! The episodic adaptation engine: per-utterance baseline decode, soft
//! prompt injection, counterfactual sampling at random temperatures,
//! reward evaluation, mean-baseline advantages, one policy-gradient step
//! at separate model/prompt learning rates, adapted decode, and exact
//! state restoration. Also hosts the simplified entropy-minimization
//! comparator.

mod bandit;

pub use bandit::reinforce_bandit_check;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    apply_sgd, bind_model, collect_model_grads, encoder_graph, mean_step_entropy_graph,
    sequence_log_prob_graph, DecodeConfig, Decoder, DecoderIds, Hypothesis, ModelParams,
    SoftPrompt,
};
use crate::reward::RewardScorer;
use crate::rng::rng_from_seed;
use crate::signal::LogMelSpectrogram;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Number of sampled counterfactual candidates per step.
    pub n_samples: usize,
    pub temp_low: f64,
    pub temp_high: f64,
    /// Model learning rate.
    pub eta1: f64,
    /// Prompt learning rate (defaults to 100 × eta1).
    pub eta2: f64,
    /// Update iterations per episode; each re-samples its candidates.
    pub steps: usize,
    /// Include the unprompted baseline decode's reward in the mean.
    pub include_baseline_decode_in_mean: bool,
    /// Include the baseline decode's log-likelihood term in the loss.
    pub include_baseline_decode_in_loss: bool,
    /// Inject the soft prompt (off for the finetune-only ablation).
    pub use_prompt: bool,
    /// Freeze encoder-side parameters during the update.
    pub freeze_encoder: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            n_samples: 4,
            temp_low: 0.4,
            temp_high: 0.6,
            eta1: 0.02,
            eta2: 2.0,
            steps: 1,
            include_baseline_decode_in_mean: true,
            include_baseline_decode_in_loss: false,
            use_prompt: true,
            freeze_encoder: false,
            max_len: 32,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temp_low > 0.0 && self.temp_low <= self.temp_high) {
            return Err(Error::Config(format!(
                "adapt temperatures must satisfy 0 < low <= high, got [{}, {}]",
                self.temp_low, self.temp_high
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("adapt.n_samples must be >= 2".into()));
        }
        if self.eta1 < 0.0 || self.eta2 < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("adapt.steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Wall-clock seconds per episode phase.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub decode_s: f64,
    pub sample_s: f64,
    pub reward_s: f64,
    pub update_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Ok,
    AbortedNonFinite,
}

/// Everything one adaptation episode produced. Parameters and prompt are
/// restored before this is returned; the hypotheses record what the
/// transiently-updated model decoded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub baseline: Hypothesis,
    pub sampled: Vec<Hypothesis>,
    /// `r0..rn`: baseline reward followed by candidate rewards.
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
    pub advantages: Vec<f64>,
    pub loss_value: f64,
    pub adapted: Hypothesis,
    pub timings: PhaseTimings,
    pub status: EpisodeStatus,
    pub grad_norm_model: f64,
    pub grad_norm_prompt: f64,
    /// Bitwise change indicators, observed after the update and before
    /// restoration.
    pub params_changed: bool,
    pub prompt_changed: bool,
}

/// Exact copy of all trainable state plus the episode PRNG state.
#[derive(Debug, Clone)]
pub struct Snapshot {
    tensors: Vec<(String, Vec<f64>)>,
    prompt: Vec<f64>,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
    rng_stream: u64,
}

pub fn take_snapshot(params: &ModelParams, prompt: &SoftPrompt, rng: &ChaCha8Rng) -> Snapshot {
    let mut tensors = Vec::new();
    params.for_each(&mut |name, t| tensors.push((name, t.data.clone())));
    Snapshot {
        tensors,
        prompt: prompt.embed.data.clone(),
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        rng_stream: rng.get_stream(),
    }
}

/// Restore every tensor bit-exactly. Idempotent; errors on shape drift.
pub fn restore_snapshot(
    snap: &Snapshot,
    params: &mut ModelParams,
    prompt: &mut SoftPrompt,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut cursor = 0usize;
    let mut err: Option<Error> = None;
    params.for_each_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let (snap_name, data) = &snap.tensors[cursor];
        cursor += 1;
        if snap_name != &name || data.len() != t.data.len() {
            err = Some(Error::State(format!(
                "snapshot drift at {} (stored {}, {} vs {} values)",
                name,
                snap_name,
                data.len(),
                t.data.len()
            )));
            return;
        }
        t.data.clone_from(data);
    });
    if let Some(e) = err {
        return Err(e);
    }
    if snap.prompt.len() != prompt.embed.data.len() {
        return Err(Error::State("snapshot drift in prompt shape".into()));
    }
    prompt.embed.data.clone_from(&snap.prompt);
    *rng = ChaCha8Rng::from_seed(snap.rng_seed);
    rng.set_stream(snap.rng_stream);
    rng.set_word_pos(snap.rng_word_pos);
    Ok(())
}

/// Mean reward over the configured set and per-entry advantages.
/// `rewards[0]` is the baseline decode's reward; it joins the mean only
/// when `include_first_in_mean` is set. Advantages are computed for every
/// entry either way.
pub fn compute_advantages(rewards: &[f64], include_first_in_mean: bool) -> Result<(f64, Vec<f64>)> {
    if rewards.len() < 2 {
        return Err(Error::Input("compute_advantages needs at least 2 rewards".into()));
    }
    let mean_set = if include_first_in_mean { rewards } else { &rewards[1..] };
    let mean = mean_set.iter().sum::<f64>() / mean_set.len() as f64;
    Ok((mean, rewards.iter().map(|r| r - mean).collect()))
}

/// `L = −(1/N) Σ_i adv_i · log P(ŷ_i | s, p)` over the given
/// (tokens, advantage) pairs; advantages are constants.
pub fn policy_gradient_loss_graph(
    tape: &mut Tape,
    ids: &DecoderIds,
    cfg: &crate::model::ModelConfig,
    enc_h: NodeId,
    terms: &[(&[usize], f64)],
    prompt: Option<NodeId>,
) -> Result<NodeId> {
    if terms.is_empty() {
        return Err(Error::Input("policy gradient loss needs at least one term".into()));
    }
    let n = terms.len() as f64;
    let mut total: Option<NodeId> = None;
    for (tokens, adv) in terms {
        let lp = sequence_log_prob_graph(tape, ids, cfg, enc_h, tokens, prompt)?;
        let weighted = tape.scale(lp, -adv / n)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    Ok(total.unwrap())
}

fn l2_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Run Algorithm-style episodic adaptation on one utterance. The caller's
/// `params` and `prompt` are mutated during the episode and restored
/// bit-exactly before return, success or abort.
pub fn adapt_one(
    mel: &LogMelSpectrogram,
    params: &mut ModelParams,
    prompt: &mut SoftPrompt,
    scorer: &RewardScorer,
    cfg: &AdaptationConfig,
) -> Result<Episode> {
    cfg.validate()?;
    let t_start = Instant::now();
    let mut rng = rng_from_seed(cfg.seed);
    let snapshot = take_snapshot(params, prompt, &rng);

    let result = run_episode(mel, params, prompt, scorer, cfg, &mut rng, &snapshot, t_start);

    // Restoration is unconditional: abort paths must leave no trace.
    restore_snapshot(&snapshot, params, prompt, &mut rng)?;
    result
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    mel: &LogMelSpectrogram,
    params: &mut ModelParams,
    prompt: &mut SoftPrompt,
    scorer: &RewardScorer,
    cfg: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
    snapshot: &Snapshot,
    t_start: Instant,
) -> Result<Episode> {
    let mut timings = PhaseTimings::default();
    let decode_cfg = DecodeConfig { temperature: 0.0, max_len: cfg.max_len, seed: 0 };

    // Baseline decode: greedy, no prompt, unadapted parameters.
    let t0 = Instant::now();
    let decoder = Decoder::new(mel, params)?;
    let mut baseline = decoder.greedy(None, &decode_cfg)?;
    timings.decode_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let r0 = scorer.score(&baseline.text())?;
    baseline.reward = Some(r0);
    timings.reward_s += t0.elapsed().as_secs_f64();

    let mut sampled = Vec::new();
    let mut rewards = vec![r0];
    let mut mean_reward = r0;
    let mut advantages = Vec::new();
    let mut loss_value = 0.0;
    let mut grad_norm_model = 0.0;
    let mut grad_norm_prompt = 0.0;
    let mut status = EpisodeStatus::Ok;

    'steps: for _step in 0..cfg.steps {
        // Counterfactual sampling under the (current) prompt.
        let t0 = Instant::now();
        // Candidates decode against the *pre-update* state of this step.
        let step_decoder = Decoder::new(mel, params)?;
        let mut step_hyps = Vec::with_capacity(cfg.n_samples);
        for _ in 0..cfg.n_samples {
            let t_i = rng.gen_range(cfg.temp_low..=cfg.temp_high);
            let seed_i = rng.next_u64();
            let dc = DecodeConfig { temperature: t_i, max_len: cfg.max_len, seed: seed_i };
            let p = if cfg.use_prompt { Some(&*prompt) } else { None };
            step_hyps.push(step_decoder.sample(p, &dc)?);
        }
        timings.sample_s += t0.elapsed().as_secs_f64();

        // Reward evaluation.
        let t0 = Instant::now();
        let mut step_rewards = vec![r0];
        for h in step_hyps.iter_mut() {
            let r = scorer.score(&h.text())?;
            h.reward = Some(r);
            step_rewards.push(r);
        }
        timings.reward_s += t0.elapsed().as_secs_f64();

        let (mean, advs) = compute_advantages(&step_rewards, cfg.include_baseline_decode_in_mean)?;

        // Policy-gradient update.
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let ids = bind_model(&mut tape, params);
        let enc_h = encoder_graph(&mut tape, &ids, &params.config, mel)?;
        let prompt_id = if cfg.use_prompt { Some(tape.leaf(&prompt.embed)) } else { None };

        let mut terms: Vec<(&[usize], f64)> = Vec::new();
        if cfg.include_baseline_decode_in_loss {
            terms.push((&baseline.tokens, advs[0]));
        }
        for (h, adv) in step_hyps.iter().zip(&advs[1..]) {
            terms.push((&h.tokens, *adv));
        }
        let loss =
            policy_gradient_loss_graph(&mut tape, &ids.decoder(), &params.config, enc_h, &terms, prompt_id)?;
        loss_value = tape.data(loss)[0];

        let backward_ok = loss_value.is_finite() && tape.backward(loss).is_ok();
        if !backward_ok {
            status = EpisodeStatus::AbortedNonFinite;
            sampled = step_hyps;
            rewards = step_rewards;
            mean_reward = mean;
            advantages = advs;
            timings.update_s += t0.elapsed().as_secs_f64();
            break 'steps;
        }

        let model_grads = collect_model_grads(&tape, &ids);
        grad_norm_model = l2_norm(&model_grads);
        apply_sgd(params, &model_grads, cfg.eta1, cfg.freeze_encoder);
        if let Some(pid) = prompt_id {
            if let Some(g) = tape.grad(pid) {
                grad_norm_prompt = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (p, gi) in prompt.embed.data.iter_mut().zip(g) {
                    *p -= cfg.eta2 * gi;
                }
            }
        }
        timings.update_s += t0.elapsed().as_secs_f64();

        sampled = step_hyps;
        rewards = step_rewards;
        mean_reward = mean;
        advantages = advs;
    }

    // Change indicators, observed before restoration.
    let mut params_changed = false;
    let mut cursor = 0usize;
    params.for_each(&mut |_, t| {
        if t.data != snapshot.tensors[cursor].1 {
            params_changed = true;
        }
        cursor += 1;
    });
    let prompt_changed = prompt.embed.data != snapshot.prompt;

    // Adapted decode under the updated parameters and prompt.
    let adapted = if status == EpisodeStatus::Ok {
        let t0 = Instant::now();
        let adapted_decoder = Decoder::new(mel, params)?;
        let mut h = adapted_decoder.greedy(if cfg.use_prompt { Some(&*prompt) } else { None }, &decode_cfg)?;
        timings.decode_s += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        h.reward = Some(scorer.score(&h.text())?);
        timings.reward_s += t0.elapsed().as_secs_f64();
        h
    } else {
        // Aborted episodes fall back to the baseline transcription.
        baseline.clone()
    };

    timings.total_s = t_start.elapsed().as_secs_f64();
    Ok(Episode {
        baseline,
        sampled,
        rewards,
        mean_reward,
        advantages,
        loss_value,
        adapted,
        timings,
        status,
        grad_norm_model,
        grad_norm_prompt,
        params_changed,
        prompt_changed,
    })
}

/// Simplified entropy-minimization comparator: one gradient step on the
/// mean per-step token-distribution entropy of the greedy decode path
/// (learning rate `eta1`, no prompt), adapted decode, restore.
pub fn entropy_min_adapt(
    mel: &LogMelSpectrogram,
    params: &mut ModelParams,
    cfg: &AdaptationConfig,
) -> Result<Episode> {
    cfg.validate()?;
    let t_start = Instant::now();
    let mut rng = rng_from_seed(cfg.seed);
    let mut unused_prompt = SoftPrompt { embed: Tensor::param(vec![0, params.config.d_model], vec![]) };
    let snapshot = take_snapshot(params, &unused_prompt, &rng);

    let result = (|| -> Result<Episode> {
        let mut timings = PhaseTimings::default();
        let decode_cfg = DecodeConfig { temperature: 0.0, max_len: cfg.max_len, seed: 0 };

        let t0 = Instant::now();
        let decoder = Decoder::new(mel, params)?;
        let baseline = decoder.greedy(None, &decode_cfg)?;
        timings.decode_s = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let ids = bind_model(&mut tape, params);
        let enc_h = encoder_graph(&mut tape, &ids, &params.config, mel)?;
        let loss =
            mean_step_entropy_graph(&mut tape, &ids.decoder(), &params.config, enc_h, &baseline.tokens, None)?;
        let loss_value = tape.data(loss)[0];
        let mut status = EpisodeStatus::Ok;
        let mut grad_norm_model = 0.0;
        if loss_value.is_finite() && tape.backward(loss).is_ok() {
            let grads = collect_model_grads(&tape, &ids);
            grad_norm_model = l2_norm(&grads);
            apply_sgd(params, &grads, cfg.eta1, cfg.freeze_encoder);
        } else {
            status = EpisodeStatus::AbortedNonFinite;
        }
        timings.update_s = t0.elapsed().as_secs_f64();

        let mut params_changed = false;
        let mut cursor = 0usize;
        params.for_each(&mut |_, t| {
            if t.data != snapshot.tensors[cursor].1 {
                params_changed = true;
            }
            cursor += 1;
        });

        let adapted = if status == EpisodeStatus::Ok {
            let t0 = Instant::now();
            let d = Decoder::new(mel, params)?;
            let h = d.greedy(None, &decode_cfg)?;
            timings.decode_s += t0.elapsed().as_secs_f64();
            h
        } else {
            baseline.clone()
        };

        timings.total_s = t_start.elapsed().as_secs_f64();
        Ok(Episode {
            baseline,
            sampled: Vec::new(),
            rewards: Vec::new(),
            mean_reward: 0.0,
            advantages: Vec::new(),
            loss_value,
            adapted,
            timings,
            status,
            grad_norm_model,
            grad_norm_prompt: 0.0,
            params_changed,
            prompt_changed: false,
        })
    })();

    restore_snapshot(&snapshot, params, &mut unused_prompt, &mut rng)?;
    result
}
