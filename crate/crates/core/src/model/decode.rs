//! Greedy and temperature-controlled autoregressive decoding.

use super::forward::{bind_decoder, decoder_text_logits};
use super::{ModelParams, SoftPrompt, BOS, EOS};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::signal::LogMelSpectrogram;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Sampling temperature; 0 means greedy.
    pub temperature: f64,
    /// Token cap including the eos token.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { temperature: 0.0, max_len: 32, seed: 0 }
    }
}

/// One decoded candidate. `tokens` are the emitted ids ending at eos or
/// the length cap; `token_log_probs` are log-softmax scores at
/// temperature 1 (the model's true distribution), regardless of the
/// sampling temperature used for generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub token_log_probs: Vec<f64>,
    pub temperature: f64,
    pub reward: Option<f64>,
}

impl Hypothesis {
    pub fn text(&self) -> String {
        super::tokens_to_text(&self.tokens)
    }

    /// Sum of per-token log-probs at temperature 1.
    pub fn log_prob(&self) -> f64 {
        self.token_log_probs.iter().sum()
    }

    /// Length-normalized log-prob (the confidence measure).
    pub fn mean_log_prob(&self) -> f64 {
        self.log_prob() / self.tokens.len().max(1) as f64
    }
}

/// Token distribution at temperature `t > 0`: `softmax(logits / t)` with
/// max subtraction. The argmax is invariant in `t` and the entries sum
/// to 1 up to rounding.
pub fn p_at_temperature(logits: &[f64], t: f64) -> Vec<f64> {
    assert!(t > 0.0, "p_at_temperature requires t > 0");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Lowest-id tie break everywhere, for cross-run determinism.
fn argmax_lowest_id(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

enum Chooser {
    Greedy,
    Sample { t: f64, rng: rand_chacha::ChaCha8Rng },
}

/// Decode driver holding frozen encoder states so several decodes of the
/// same utterance reuse one encoder pass.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    enc_h: Tensor,
}

impl<'a> Decoder<'a> {
    pub fn new(mel: &LogMelSpectrogram, params: &'a ModelParams) -> Result<Self> {
        let enc_h = super::forward::encode(mel, params)?;
        Ok(Decoder { params, enc_h })
    }

    pub fn from_states(enc_h: Tensor, params: &'a ModelParams) -> Self {
        Decoder { params, enc_h }
    }

    pub fn enc_states(&self) -> &Tensor {
        &self.enc_h
    }

    pub fn greedy(&self, prompt: Option<&SoftPrompt>, cfg: &DecodeConfig) -> Result<Hypothesis> {
        if cfg.temperature != 0.0 {
            return Err(Error::Input("greedy decode requires temperature 0".into()));
        }
        self.run(prompt, cfg.max_len, Chooser::Greedy, 0.0)
    }

    pub fn sample(&self, prompt: Option<&SoftPrompt>, cfg: &DecodeConfig) -> Result<Hypothesis> {
        if cfg.temperature <= 0.0 {
            return Err(Error::Input("sample decode requires temperature > 0".into()));
        }
        let rng = rng_from_seed(cfg.seed);
        self.run(prompt, cfg.max_len, Chooser::Sample { t: cfg.temperature, rng }, cfg.temperature)
    }

    fn run(
        &self,
        prompt: Option<&SoftPrompt>,
        max_len: usize,
        mut chooser: Chooser,
        temperature: f64,
    ) -> Result<Hypothesis> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be >= 1".into()));
        }
        // One tape per decode: parameters bound once, every step appends
        // its own forward pass over the growing prefix.
        let mut tape = Tape::new();
        let ids = bind_decoder(&mut tape, self.params);
        let enc = tape.constant(self.enc_h.shape.clone(), self.enc_h.data.clone());
        let prompt_id = prompt.map(|p| tape.constant(p.embed.shape.clone(), p.embed.data.clone()));

        let mut tokens: Vec<usize> = Vec::new();
        let mut log_probs: Vec<f64> = Vec::new();
        let mut input = vec![BOS];
        loop {
            let logits_id =
                decoder_text_logits(&mut tape, &ids, &self.params.config, enc, &input, prompt_id)?;
            let shape = tape.value(logits_id).shape.clone();
            let (rows, v) = (shape[0], shape[1]);
            let logits = &tape.data(logits_id)[(rows - 1) * v..];

            let token = match &mut chooser {
                Chooser::Greedy => argmax_lowest_id(logits),
                Chooser::Sample { t, rng } => {
                    let p = p_at_temperature(logits, *t);
                    // Inverse CDF over the sorted-by-id probability vector,
                    // one draw per step.
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut chosen = p.len() - 1;
                    for (i, &pi) in p.iter().enumerate() {
                        acc += pi;
                        if u < acc {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                }
            };
            log_probs.push(log_softmax_vec(logits)[token]);
            tokens.push(token);
            if token == EOS || tokens.len() >= max_len {
                break;
            }
            input.push(token);
        }
        Ok(Hypothesis { tokens, token_log_probs: log_probs, temperature, reward: None })
    }
}

/// Deterministic argmax decode (ties broken toward the lowest token id),
/// stopping at eos or `max_len`.
pub fn greedy_decode(
    mel: &LogMelSpectrogram,
    prompt: Option<&SoftPrompt>,
    params: &ModelParams,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    Decoder::new(mel, params)?.greedy(prompt, cfg)
}

/// Temperature-controlled stochastic decode; deterministic given
/// `cfg.seed`.
pub fn sample_decode(
    mel: &LogMelSpectrogram,
    prompt: Option<&SoftPrompt>,
    params: &ModelParams,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    Decoder::new(mel, params)?.sample(prompt, cfg)
}
