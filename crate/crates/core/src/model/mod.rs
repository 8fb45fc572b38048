//! The miniature encoder–decoder transcriber: a spectrogram encoder, an
//! autoregressive character decoder with optional soft-prompt injection,
//! greedy and temperature-controlled decoding, differentiable sequence
//! log-probability, and supervised pretraining.

mod decode;
mod forward;
mod train;

pub use decode::{greedy_decode, p_at_temperature, sample_decode, DecodeConfig, Decoder, Hypothesis};
pub use forward::{
    bind_decoder, bind_model, decode_logits, decoder_text_logits, encode, encoder_graph,
    mean_step_entropy_graph, sequence_log_prob, sequence_log_prob_graph, DecoderIds, EncLayerIds,
    LnIds, ModelIds,
};
pub(crate) use forward::{bind_attn, bind_ff, bind_ln, enc_layer_apply, pe_constant};
pub use train::{
    apply_sgd, collect_model_grads, pretrain, PretrainConfig, TrainCurvePoint, TrainOutcome,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::signal::ALPHABET;
use serde::{Deserialize, Serialize};

/// Begin-of-sequence token id.
pub const BOS: usize = 16;
/// End-of-sequence token id.
pub const EOS: usize = 17;
/// Padding token id (reserved; per-sample training never pads).
pub const PAD: usize = 18;
/// Unknown-symbol token id.
pub const UNK: usize = 19;
/// Vocabulary: 16 symbols + bos + eos + pad + unk.
pub const VOCAB: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub prompt_len: usize,
    pub alphabet: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bins: 26,
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            vocab: VOCAB,
            max_len: 32,
            prompt_len: 4,
            alphabet: ALPHABET.to_string(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab != self.alphabet.chars().count() + 4 {
            return Err(Error::Config(format!(
                "model.vocab {} must be alphabet length {} + 4",
                self.vocab,
                self.alphabet.chars().count()
            )));
        }
        if self.max_len < 1 || self.mel_bins == 0 || self.prompt_len > 64 {
            return Err(Error::Config("model dimensions out of range".into()));
        }
        Ok(())
    }

    /// A tiny configuration for finite-difference checks of whole graphs.
    pub fn tiny() -> Self {
        ModelConfig {
            mel_bins: 6,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 12,
            vocab: VOCAB,
            max_len: 8,
            prompt_len: 2,
            alphabet: ALPHABET.to_string(),
        }
    }
}

/// Soft prompt parameters: `prompt_len × d_model` continuous embeddings
/// prepended before the bos embedding at decode time.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub embed: Tensor,
}

impl SoftPrompt {
    /// Entries i.i.d. normal with std 0.02, matching the embedding init.
    pub fn init(len: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut t = Tensor::randn(vec![len, d_model], 0.02, &mut rng);
        t.requires_grad = true;
        SoftPrompt { embed: t }
    }

    pub fn len(&self) -> usize {
        self.embed.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of trainable prompt parameters.
pub fn count_prompt_params(len: usize, d_model: usize) -> usize {
    len * d_model
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub heads: Vec<HeadParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncLayerParams {
    pub ln1: LnParams,
    pub attn: AttnParams,
    pub ln2: LnParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecLayerParams {
    pub ln1: LnParams,
    pub self_attn: AttnParams,
    pub ln2: LnParams,
    pub cross_attn: AttnParams,
    pub ln3: LnParams,
    pub ff: FeedForwardParams,
}

/// All trainable tensors of the transcriber. The token embedding table
/// also serves as the output projection (one storage identity).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub in_proj_w: Tensor,
    pub in_proj_b: Tensor,
    pub enc: Vec<EncLayerParams>,
    pub enc_ln: LnParams,
    pub tok_embed: Tensor,
    pub dec: Vec<DecLayerParams>,
    pub dec_ln: LnParams,
}

pub(crate) fn ln_init(d: usize) -> LnParams {
    LnParams {
        gain: Tensor::param(vec![d], vec![1.0; d]),
        bias: Tensor::param(vec![d], vec![0.0; d]),
    }
}

pub(crate) fn attn_init(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> AttnParams {
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let heads = (0..cfg.n_heads)
        .map(|_| {
            let mut p = |rows: usize, cols: usize, fan_in: usize| {
                let mut t = Tensor::randn(vec![rows, cols], 1.0 / (fan_in as f64).sqrt(), rng);
                t.requires_grad = true;
                t
            };
            HeadParams { wq: p(d, dh, d), wk: p(d, dh, d), wv: p(d, dh, d), wo: p(dh, d, dh) }
        })
        .collect();
    AttnParams { heads }
}

pub(crate) fn ff_init(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> FeedForwardParams {
    let (d, f) = (cfg.d_model, cfg.ff_dim);
    let mut w1 = Tensor::randn(vec![d, f], 1.0 / (d as f64).sqrt(), rng);
    w1.requires_grad = true;
    let mut w2 = Tensor::randn(vec![f, d], 1.0 / (f as f64).sqrt(), rng);
    w2.requires_grad = true;
    FeedForwardParams {
        w1,
        b1: Tensor::param(vec![f], vec![0.0; f]),
        w2,
        b2: Tensor::param(vec![d], vec![0.0; d]),
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let (f, d) = (config.mel_bins, config.d_model);

        let mut in_proj_w = Tensor::randn(vec![f, d], 1.0 / (f as f64).sqrt(), &mut rng);
        in_proj_w.requires_grad = true;
        let in_proj_b = Tensor::param(vec![d], vec![0.0; d]);

        let enc = (0..config.enc_layers)
            .map(|_| EncLayerParams {
                ln1: ln_init(d),
                attn: attn_init(config, &mut rng),
                ln2: ln_init(d),
                ff: ff_init(config, &mut rng),
            })
            .collect();

        let mut tok_embed = Tensor::randn(vec![config.vocab, d], 0.02, &mut rng);
        tok_embed.requires_grad = true;

        let dec = (0..config.dec_layers)
            .map(|_| DecLayerParams {
                ln1: ln_init(d),
                self_attn: attn_init(config, &mut rng),
                ln2: ln_init(d),
                cross_attn: attn_init(config, &mut rng),
                ln3: ln_init(d),
                ff: ff_init(config, &mut rng),
            })
            .collect();

        Ok(ModelParams {
            config: config.clone(),
            in_proj_w,
            in_proj_b,
            enc,
            enc_ln: ln_init(d),
            tok_embed,
            dec,
            dec_ln: ln_init(d),
        })
    }

    /// Visit every trainable tensor in canonical order.
    pub fn for_each<'s>(&'s self, f: &mut impl FnMut(String, &'s Tensor)) {
        f("in_proj.w".into(), &self.in_proj_w);
        f("in_proj.b".into(), &self.in_proj_b);
        for (i, l) in self.enc.iter().enumerate() {
            let p = format!("enc.{}", i);
            f(format!("{}.ln1.g", p), &l.ln1.gain);
            f(format!("{}.ln1.b", p), &l.ln1.bias);
            for (h, hp) in l.attn.heads.iter().enumerate() {
                f(format!("{}.attn.h{}.wq", p, h), &hp.wq);
                f(format!("{}.attn.h{}.wk", p, h), &hp.wk);
                f(format!("{}.attn.h{}.wv", p, h), &hp.wv);
                f(format!("{}.attn.h{}.wo", p, h), &hp.wo);
            }
            f(format!("{}.ln2.g", p), &l.ln2.gain);
            f(format!("{}.ln2.b", p), &l.ln2.bias);
            f(format!("{}.ff.w1", p), &l.ff.w1);
            f(format!("{}.ff.b1", p), &l.ff.b1);
            f(format!("{}.ff.w2", p), &l.ff.w2);
            f(format!("{}.ff.b2", p), &l.ff.b2);
        }
        f("enc_ln.g".into(), &self.enc_ln.gain);
        f("enc_ln.b".into(), &self.enc_ln.bias);
        f("tok_embed".into(), &self.tok_embed);
        for (i, l) in self.dec.iter().enumerate() {
            let p = format!("dec.{}", i);
            f(format!("{}.ln1.g", p), &l.ln1.gain);
            f(format!("{}.ln1.b", p), &l.ln1.bias);
            for (h, hp) in l.self_attn.heads.iter().enumerate() {
                f(format!("{}.self.h{}.wq", p, h), &hp.wq);
                f(format!("{}.self.h{}.wk", p, h), &hp.wk);
                f(format!("{}.self.h{}.wv", p, h), &hp.wv);
                f(format!("{}.self.h{}.wo", p, h), &hp.wo);
            }
            f(format!("{}.ln2.g", p), &l.ln2.gain);
            f(format!("{}.ln2.b", p), &l.ln2.bias);
            for (h, hp) in l.cross_attn.heads.iter().enumerate() {
                f(format!("{}.cross.h{}.wq", p, h), &hp.wq);
                f(format!("{}.cross.h{}.wk", p, h), &hp.wk);
                f(format!("{}.cross.h{}.wv", p, h), &hp.wv);
                f(format!("{}.cross.h{}.wo", p, h), &hp.wo);
            }
            f(format!("{}.ln3.g", p), &l.ln3.gain);
            f(format!("{}.ln3.b", p), &l.ln3.bias);
            f(format!("{}.ff.w1", p), &l.ff.w1);
            f(format!("{}.ff.b1", p), &l.ff.b1);
            f(format!("{}.ff.w2", p), &l.ff.w2);
            f(format!("{}.ff.b2", p), &l.ff.b2);
        }
        f("dec_ln.g".into(), &self.dec_ln.gain);
        f("dec_ln.b".into(), &self.dec_ln.bias);
    }

    /// Mutable visit, same canonical order as [`ModelParams::for_each`].
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("in_proj.w".into(), &mut self.in_proj_w);
        f("in_proj.b".into(), &mut self.in_proj_b);
        for (i, l) in self.enc.iter_mut().enumerate() {
            let p = format!("enc.{}", i);
            f(format!("{}.ln1.g", p), &mut l.ln1.gain);
            f(format!("{}.ln1.b", p), &mut l.ln1.bias);
            for (h, hp) in l.attn.heads.iter_mut().enumerate() {
                f(format!("{}.attn.h{}.wq", p, h), &mut hp.wq);
                f(format!("{}.attn.h{}.wk", p, h), &mut hp.wk);
                f(format!("{}.attn.h{}.wv", p, h), &mut hp.wv);
                f(format!("{}.attn.h{}.wo", p, h), &mut hp.wo);
            }
            f(format!("{}.ln2.g", p), &mut l.ln2.gain);
            f(format!("{}.ln2.b", p), &mut l.ln2.bias);
            f(format!("{}.ff.w1", p), &mut l.ff.w1);
            f(format!("{}.ff.b1", p), &mut l.ff.b1);
            f(format!("{}.ff.w2", p), &mut l.ff.w2);
            f(format!("{}.ff.b2", p), &mut l.ff.b2);
        }
        f("enc_ln.g".into(), &mut self.enc_ln.gain);
        f("enc_ln.b".into(), &mut self.enc_ln.bias);
        f("tok_embed".into(), &mut self.tok_embed);
        for (i, l) in self.dec.iter_mut().enumerate() {
            let p = format!("dec.{}", i);
            f(format!("{}.ln1.g", p), &mut l.ln1.gain);
            f(format!("{}.ln1.b", p), &mut l.ln1.bias);
            for (h, hp) in l.self_attn.heads.iter_mut().enumerate() {
                f(format!("{}.self.h{}.wq", p, h), &mut hp.wq);
                f(format!("{}.self.h{}.wk", p, h), &mut hp.wk);
                f(format!("{}.self.h{}.wv", p, h), &mut hp.wv);
                f(format!("{}.self.h{}.wo", p, h), &mut hp.wo);
            }
            f(format!("{}.ln2.g", p), &mut l.ln2.gain);
            f(format!("{}.ln2.b", p), &mut l.ln2.bias);
            for (h, hp) in l.cross_attn.heads.iter_mut().enumerate() {
                f(format!("{}.cross.h{}.wq", p, h), &mut hp.wq);
                f(format!("{}.cross.h{}.wk", p, h), &mut hp.wk);
                f(format!("{}.cross.h{}.wv", p, h), &mut hp.wv);
                f(format!("{}.cross.h{}.wo", p, h), &mut hp.wo);
            }
            f(format!("{}.ln3.g", p), &mut l.ln3.gain);
            f(format!("{}.ln3.b", p), &mut l.ln3.bias);
            f(format!("{}.ff.w1", p), &mut l.ff.w1);
            f(format!("{}.ff.b1", p), &mut l.ff.b1);
            f(format!("{}.ff.w2", p), &mut l.ff.w2);
            f(format!("{}.ff.b2", p), &mut l.ff.b2);
        }
        f("dec_ln.g".into(), &mut self.dec_ln.gain);
        f("dec_ln.b".into(), &mut self.dec_ln.bias);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(&mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |n, _| out.push(n));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config)?;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        self.for_each(&mut |n, t| named.push((n, t)));
        crate::checkpoint::write_named_tensors(path, "model", 1, &cfg, &named)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (kind, _version, cfg_bytes, tensors) = crate::checkpoint::read_named_tensors(path)?;
        if kind != "model" {
            return Err(Error::Config(format!("checkpoint kind {:?}, expected \"model\"", kind)));
        }
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
        let mut params = ModelParams::init(&config, 0)?;
        let map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut missing = Vec::new();
        params.for_each_mut(&mut |name, t| match map.get(&name) {
            Some(loaded) if loaded.shape == t.shape => {
                t.data.clone_from(&loaded.data);
            }
            Some(loaded) => missing.push(format!("{} (shape {:?} vs {:?})", name, loaded.shape, t.shape)),
            None => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::Config(format!("checkpoint/config mismatch: {}", missing.join(", "))));
        }
        Ok(params)
    }
}

/// Map corpus text to token ids; unknown symbols map to [`UNK`].
pub fn text_to_tokens(text: &str) -> Vec<usize> {
    text.chars().map(|c| crate::signal::symbol_index(c).unwrap_or(UNK)).collect()
}

/// Render emitted token ids as text: symbols become characters, `UNK`
/// renders as `?`, control tokens are dropped.
pub fn tokens_to_text(tokens: &[usize]) -> String {
    let alpha: Vec<char> = ALPHABET.chars().collect();
    tokens
        .iter()
        .filter_map(|&t| {
            if t < 16 {
                Some(alpha[t])
            } else if t == UNK {
                Some('?')
            } else {
                None
            }
        })
        .collect()
}

/// Standard sinusoidal position encodings, `n_pos × d` row-major.
pub fn sinusoidal_pe(n_pos: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n_pos * d];
    for pos in 0..n_pos {
        for i in 0..d / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = (pos as f64 * omega).sin();
            pe[pos * d + 2 * i + 1] = (pos as f64 * omega).cos();
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_param_count() {
        assert_eq!(count_prompt_params(4, 384), 1536);
        assert_eq!(count_prompt_params(4, 64), 256);
        assert_eq!(count_prompt_params(1, 1), 1);
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 5).unwrap();
        let b = ModelParams::init(&cfg, 5).unwrap();
        assert_eq!(a, b);
        a.for_each(&mut |name, t| {
            assert!(t.all_finite(), "{} has non-finite entries", name);
            assert!(t.requires_grad, "{} must be trainable", name);
        });
    }

    #[test]
    fn token_round_trip() {
        assert_eq!(text_to_tokens("abp"), vec![0, 1, 15]);
        assert_eq!(tokens_to_text(&[0, 1, 15, EOS]), "abp");
        assert_eq!(tokens_to_text(&[UNK]), "?");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::init(&ModelConfig::tiny(), 9).unwrap();
        let p1 = dir.path().join("m1.ckpt");
        params.save(&p1).unwrap();
        let loaded = ModelParams::load(&p1).unwrap();
        assert_eq!(params, loaded);
        let p2 = dir.path().join("m2.ckpt");
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.n_heads = 3;
        assert!(matches!(ModelParams::init(&cfg, 0), Err(Error::Config(_))));
    }
}
