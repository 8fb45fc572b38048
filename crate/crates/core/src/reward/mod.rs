//! Reward models: a miniature contrastive audio–text embedding model
//! whose cosine similarity scores transcription candidates, a character
//! trigram LM as the text-only plausibility channel, and their weighted
//! combination.
//!
//! The audio tower is independently parameterized from the transcriber —
//! the critic must stay external to the policy it scores — and reward
//! parameters are frozen during adaptation episodes.

mod lm;
mod train;

pub use lm::TrigramLm;
pub use train::{train_contrastive, RewardTrainConfig, RewardTrainOutcome};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    attn_init, bind_attn, bind_ff, bind_ln, enc_layer_apply, ff_init, ln_init, pe_constant,
    text_to_tokens, AttnParams, EncLayerIds, EncLayerParams, FeedForwardParams, LnParams,
    ModelConfig, VOCAB,
};
use crate::rng::rng_from_seed;
use crate::signal::LogMelSpectrogram;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Clap,
    Lm,
    ClapPlusLm,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clap" => Ok(RewardMode::Clap),
            "lm" => Ok(RewardMode::Lm),
            "clap_plus_lm" => Ok(RewardMode::ClapPlusLm),
            other => Err(Error::Input(format!("unknown reward mode {:?}", other))),
        }
    }
}

impl RewardMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardMode::Clap => "clap",
            RewardMode::Lm => "lm",
            RewardMode::ClapPlusLm => "clap_plus_lm",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// Weight of the LM channel in `clap_plus_lm`.
    pub lm_weight: f64,
    /// Reward assigned to an empty transcription without invoking towers.
    pub empty_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { mode: RewardMode::Clap, lm_weight: 0.5, empty_penalty: -1.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lm_weight) {
            return Err(Error::Config(format!("reward.lm_weight {} outside [0,1]", self.lm_weight)));
        }
        Ok(())
    }
}

/// Tower dimensions. The audio tower mirrors the transcriber encoder's
/// frontend dims; both towers project into the same embedding space.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTowerConfig {
    pub mel_bins: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub audio_layers: usize,
    pub text_layers: usize,
    pub ff_dim: usize,
    pub embed_dim: usize,
}

impl Default for RewardTowerConfig {
    fn default() -> Self {
        RewardTowerConfig {
            mel_bins: 26,
            d_model: 64,
            n_heads: 4,
            audio_layers: 2,
            text_layers: 1,
            ff_dim: 128,
            embed_dim: 32,
        }
    }
}

impl RewardTowerConfig {
    fn as_model_config(&self, layers: usize) -> ModelConfig {
        ModelConfig {
            mel_bins: self.mel_bins,
            d_model: self.d_model,
            n_heads: self.n_heads,
            enc_layers: layers,
            dec_layers: 0,
            ff_dim: self.ff_dim,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("reward.d_model not divisible by reward.n_heads".into()));
        }
        Ok(())
    }
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub in_proj_w: Tensor,
    pub in_proj_b: Tensor,
    pub layers: Vec<EncLayerParams>,
    pub final_ln: LnParams,
    pub out_proj: Tensor,
}

/// Contrastive audio–text model: two independent towers projecting to a
/// shared embedding space, plus a learnable similarity scale for
/// training (initialized to 1/0.07).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModelParams {
    pub config: RewardTowerConfig,
    pub audio: TowerParams,
    pub text_embed: Tensor,
    pub text: Vec<EncLayerParams>,
    pub text_final_ln: LnParams,
    pub text_out_proj: Tensor,
    pub logit_scale: Tensor,
}

fn tower_init(cfg: &RewardTowerConfig, in_dim: usize, layers: usize, rng: &mut impl rand::Rng) -> TowerParams {
    let mcfg = cfg.as_model_config(layers);
    let d = cfg.d_model;
    let mut in_proj_w = Tensor::randn(vec![in_dim, d], 1.0 / (in_dim as f64).sqrt(), rng);
    in_proj_w.requires_grad = true;
    let mut out_proj = Tensor::randn(vec![d, cfg.embed_dim], 1.0 / (d as f64).sqrt(), rng);
    out_proj.requires_grad = true;
    TowerParams {
        in_proj_w,
        in_proj_b: Tensor::param(vec![d], vec![0.0; d]),
        layers: (0..layers)
            .map(|_| EncLayerParams {
                ln1: ln_init(d),
                attn: attn_init(&mcfg, rng),
                ln2: ln_init(d),
                ff: ff_init(&mcfg, rng),
            })
            .collect(),
        final_ln: ln_init(d),
        out_proj,
    }
}

impl RewardModelParams {
    pub fn init(config: &RewardTowerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let d = config.d_model;
        let mcfg = config.as_model_config(config.text_layers);
        let audio = tower_init(config, config.mel_bins, config.audio_layers, &mut rng);
        let mut text_embed = Tensor::randn(vec![VOCAB, d], 0.02, &mut rng);
        text_embed.requires_grad = true;
        let text = (0..config.text_layers)
            .map(|_| EncLayerParams {
                ln1: ln_init(d),
                attn: attn_init(&mcfg, &mut rng),
                ln2: ln_init(d),
                ff: ff_init(&mcfg, &mut rng),
            })
            .collect();
        let mut text_out_proj = Tensor::randn(vec![d, config.embed_dim], 1.0 / (d as f64).sqrt(), &mut rng);
        text_out_proj.requires_grad = true;
        Ok(RewardModelParams {
            config: config.clone(),
            audio,
            text_embed,
            text,
            text_final_ln: ln_init(d),
            text_out_proj,
            logit_scale: Tensor::param(vec![], vec![1.0 / 0.07]),
        })
    }

    pub fn for_each<'s>(&'s self, f: &mut impl FnMut(String, &'s Tensor)) {
        let tower = |pfx: &str, t: &'s TowerParams, f: &mut dyn FnMut(String, &'s Tensor)| {
            f(format!("{}.in_proj.w", pfx), &t.in_proj_w);
            f(format!("{}.in_proj.b", pfx), &t.in_proj_b);
            for (i, l) in t.layers.iter().enumerate() {
                enc_layer_visit(&format!("{}.enc.{}", pfx, i), l, f);
            }
            f(format!("{}.final_ln.g", pfx), &t.final_ln.gain);
            f(format!("{}.final_ln.b", pfx), &t.final_ln.bias);
            f(format!("{}.out_proj", pfx), &t.out_proj);
        };
        tower("audio", &self.audio, f);
        f("text.embed".into(), &self.text_embed);
        for (i, l) in self.text.iter().enumerate() {
            enc_layer_visit(&format!("text.enc.{}", i), l, f);
        }
        f("text.final_ln.g".into(), &self.text_final_ln.gain);
        f("text.final_ln.b".into(), &self.text_final_ln.bias);
        f("text.out_proj".into(), &self.text_out_proj);
        f("logit_scale".into(), &self.logit_scale);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        let tower = |pfx: &str, t: &mut TowerParams, f: &mut dyn FnMut(String, &mut Tensor)| {
            f(format!("{}.in_proj.w", pfx), &mut t.in_proj_w);
            f(format!("{}.in_proj.b", pfx), &mut t.in_proj_b);
            for (i, l) in t.layers.iter_mut().enumerate() {
                enc_layer_visit_mut(&format!("{}.enc.{}", pfx, i), l, f);
            }
            f(format!("{}.final_ln.g", pfx), &mut t.final_ln.gain);
            f(format!("{}.final_ln.b", pfx), &mut t.final_ln.bias);
            f(format!("{}.out_proj", pfx), &mut t.out_proj);
        };
        tower("audio", &mut self.audio, f);
        f("text.embed".into(), &mut self.text_embed);
        for (i, l) in self.text.iter_mut().enumerate() {
            enc_layer_visit_mut(&format!("text.enc.{}", i), l, f);
        }
        f("text.final_ln.g".into(), &mut self.text_final_ln.gain);
        f("text.final_ln.b".into(), &mut self.text_final_ln.bias);
        f("text.out_proj".into(), &mut self.text_out_proj);
        f("logit_scale".into(), &mut self.logit_scale);
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
        crate::checkpoint::write_named_tensors(path, "reward", 1, &cfg, &named)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (kind, _v, cfg_bytes, tensors) = crate::checkpoint::read_named_tensors(path)?;
        if kind != "reward" {
            return Err(Error::Config(format!("checkpoint kind {:?}, expected \"reward\"", kind)));
        }
        let config: RewardTowerConfig = serde_json::from_slice(&cfg_bytes)?;
        let mut params = RewardModelParams::init(&config, 0)?;
        let map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut missing = Vec::new();
        params.for_each_mut(&mut |name, t| match map.get(&name) {
            Some(loaded) if loaded.shape == t.shape => t.data.clone_from(&loaded.data),
            Some(_) => missing.push(format!("{} (shape mismatch)", name)),
            None => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::Config(format!("checkpoint/config mismatch: {}", missing.join(", "))));
        }
        Ok(params)
    }
}

fn enc_layer_visit<'s>(
    pfx: &str,
    l: &'s EncLayerParams,
    f: &mut dyn FnMut(String, &'s Tensor),
) {
    f(format!("{}.ln1.g", pfx), &l.ln1.gain);
    f(format!("{}.ln1.b", pfx), &l.ln1.bias);
    for (h, hp) in l.attn.heads.iter().enumerate() {
        f(format!("{}.h{}.wq", pfx, h), &hp.wq);
        f(format!("{}.h{}.wk", pfx, h), &hp.wk);
        f(format!("{}.h{}.wv", pfx, h), &hp.wv);
        f(format!("{}.h{}.wo", pfx, h), &hp.wo);
    }
    f(format!("{}.ln2.g", pfx), &l.ln2.gain);
    f(format!("{}.ln2.b", pfx), &l.ln2.bias);
    f(format!("{}.ff.w1", pfx), &l.ff.w1);
    f(format!("{}.ff.b1", pfx), &l.ff.b1);
    f(format!("{}.ff.w2", pfx), &l.ff.w2);
    f(format!("{}.ff.b2", pfx), &l.ff.b2);
}

fn enc_layer_visit_mut(
    pfx: &str,
    l: &mut EncLayerParams,
    f: &mut dyn FnMut(String, &mut Tensor),
) {
    f(format!("{}.ln1.g", pfx), &mut l.ln1.gain);
    f(format!("{}.ln1.b", pfx), &mut l.ln1.bias);
    for (h, hp) in l.attn.heads.iter_mut().enumerate() {
        f(format!("{}.h{}.wq", pfx, h), &mut hp.wq);
        f(format!("{}.h{}.wk", pfx, h), &mut hp.wk);
        f(format!("{}.h{}.wv", pfx, h), &mut hp.wv);
        f(format!("{}.h{}.wo", pfx, h), &mut hp.wo);
    }
    f(format!("{}.ln2.g", pfx), &mut l.ln2.gain);
    f(format!("{}.ln2.b", pfx), &mut l.ln2.bias);
    f(format!("{}.ff.w1", pfx), &mut l.ff.w1);
    f(format!("{}.ff.b1", pfx), &mut l.ff.b1);
    f(format!("{}.ff.w2", pfx), &mut l.ff.w2);
    f(format!("{}.ff.b2", pfx), &mut l.ff.b2);
}

// ── tape-graph bindings ──────────────────────────────────────────────

pub(crate) struct TowerIds {
    pub in_proj_w: NodeId,
    pub in_proj_b: NodeId,
    pub layers: Vec<EncLayerIds>,
    pub final_ln: crate::model::LnIds,
    pub out_proj: NodeId,
}

pub(crate) struct RewardIds {
    pub audio: TowerIds,
    pub text_embed: NodeId,
    pub text: Vec<EncLayerIds>,
    pub text_final_ln: crate::model::LnIds,
    pub text_out_proj: NodeId,
    pub logit_scale: NodeId,
}

impl RewardIds {
    pub fn for_each(&self, f: &mut impl FnMut(String, NodeId)) {
        let tower = |pfx: &str, t: &TowerIds, f: &mut dyn FnMut(String, NodeId)| {
            f(format!("{}.in_proj.w", pfx), t.in_proj_w);
            f(format!("{}.in_proj.b", pfx), t.in_proj_b);
            for (i, l) in t.layers.iter().enumerate() {
                enc_layer_ids_visit(&format!("{}.enc.{}", pfx, i), l, f);
            }
            f(format!("{}.final_ln.g", pfx), t.final_ln.gain);
            f(format!("{}.final_ln.b", pfx), t.final_ln.bias);
            f(format!("{}.out_proj", pfx), t.out_proj);
        };
        tower("audio", &self.audio, f);
        f("text.embed".into(), self.text_embed);
        for (i, l) in self.text.iter().enumerate() {
            enc_layer_ids_visit(&format!("text.enc.{}", i), l, f);
        }
        f("text.final_ln.g".into(), self.text_final_ln.gain);
        f("text.final_ln.b".into(), self.text_final_ln.bias);
        f("text.out_proj".into(), self.text_out_proj);
        f("logit_scale".into(), self.logit_scale);
    }
}

fn enc_layer_ids_visit(pfx: &str, l: &EncLayerIds, f: &mut dyn FnMut(String, NodeId)) {
    f(format!("{}.ln1.g", pfx), l.ln1.gain);
    f(format!("{}.ln1.b", pfx), l.ln1.bias);
    for (h, hp) in l.attn.heads.iter().enumerate() {
        f(format!("{}.h{}.wq", pfx, h), hp.wq);
        f(format!("{}.h{}.wk", pfx, h), hp.wk);
        f(format!("{}.h{}.wv", pfx, h), hp.wv);
        f(format!("{}.h{}.wo", pfx, h), hp.wo);
    }
    f(format!("{}.ln2.g", pfx), l.ln2.gain);
    f(format!("{}.ln2.b", pfx), l.ln2.bias);
    f(format!("{}.ff.w1", pfx), l.ff.w1);
    f(format!("{}.ff.b1", pfx), l.ff.b1);
    f(format!("{}.ff.w2", pfx), l.ff.w2);
    f(format!("{}.ff.b2", pfx), l.ff.b2);
}

pub(crate) fn bind_reward(tape: &mut Tape, p: &RewardModelParams) -> RewardIds {
    let tower = |tape: &mut Tape, t: &TowerParams| TowerIds {
        in_proj_w: tape.leaf(&t.in_proj_w),
        in_proj_b: tape.leaf(&t.in_proj_b),
        layers: t
            .layers
            .iter()
            .map(|l| EncLayerIds {
                ln1: bind_ln(tape, &l.ln1),
                attn: bind_attn(tape, &l.attn),
                ln2: bind_ln(tape, &l.ln2),
                ff: bind_ff(tape, &l.ff),
            })
            .collect(),
        final_ln: bind_ln(tape, &t.final_ln),
        out_proj: tape.leaf(&t.out_proj),
    };
    RewardIds {
        audio: tower(tape, &p.audio),
        text_embed: tape.leaf(&p.text_embed),
        text: p
            .text
            .iter()
            .map(|l| EncLayerIds {
                ln1: bind_ln(tape, &l.ln1),
                attn: bind_attn(tape, &l.attn),
                ln2: bind_ln(tape, &l.ln2),
                ff: bind_ff(tape, &l.ff),
            })
            .collect(),
        text_final_ln: bind_ln(tape, &p.text_final_ln),
        text_out_proj: tape.leaf(&p.text_out_proj),
        logit_scale: tape.leaf(&p.logit_scale),
    }
}

/// Audio tower graph → unit-norm `[1×e]` embedding node.
pub(crate) fn audio_tower_graph(
    tape: &mut Tape,
    ids: &RewardIds,
    cfg: &RewardTowerConfig,
    mel: &LogMelSpectrogram,
) -> Result<NodeId> {
    if mel.n_mels != cfg.mel_bins {
        return Err(Error::Shape(format!(
            "embed_audio: {} mel bins, reward tower expects {}",
            mel.n_mels, cfg.mel_bins
        )));
    }
    let t = mel.n_frames;
    let x = tape.constant(vec![t, cfg.mel_bins], mel.data.clone());
    let x = tape.matmul(x, ids.audio.in_proj_w)?;
    let mut x = tape.add_row(x, ids.audio.in_proj_b)?;
    let pe = pe_constant(tape, t, cfg.d_model);
    x = tape.add(x, pe)?;
    let inv = 1.0 / ((cfg.d_model / cfg.n_heads) as f64).sqrt();
    for layer in &ids.audio.layers {
        x = enc_layer_apply(tape, layer, x, inv)?;
    }
    x = tape.layer_norm(x, ids.audio.final_ln.gain, ids.audio.final_ln.bias)?;
    let pooled = tape.mean_rows(x)?;
    let proj = tape.matmul(pooled, ids.audio.out_proj)?;
    tape.normalize_rows(proj)
}

/// Text tower graph → unit-norm `[1×e]` embedding node.
pub(crate) fn text_tower_graph(
    tape: &mut Tape,
    ids: &RewardIds,
    cfg: &RewardTowerConfig,
    text: &str,
) -> Result<NodeId> {
    if text.is_empty() {
        return Err(Error::Input("embed_text: empty text".into()));
    }
    let tokens = text_to_tokens(text);
    let emb = tape.gather_rows(ids.text_embed, &tokens)?;
    let pe = pe_constant(tape, tokens.len(), cfg.d_model);
    let mut x = tape.add(emb, pe)?;
    let inv = 1.0 / ((cfg.d_model / cfg.n_heads) as f64).sqrt();
    for layer in &ids.text {
        x = enc_layer_apply(tape, layer, x, inv)?;
    }
    x = tape.layer_norm(x, ids.text_final_ln.gain, ids.text_final_ln.bias)?;
    let pooled = tape.mean_rows(x)?;
    let proj = tape.matmul(pooled, ids.text_out_proj)?;
    tape.normalize_rows(proj)
}

/// Unit-norm pooled embedding of a spectrogram.
pub fn embed_audio(mel: &LogMelSpectrogram, rp: &RewardModelParams) -> Result<Embedding> {
    let mut tape = Tape::new();
    let ids = bind_reward(&mut tape, rp);
    let e = audio_tower_graph(&mut tape, &ids, &rp.config, mel)?;
    Ok(Embedding { vector: tape.data(e).to_vec() })
}

/// Unit-norm pooled embedding of a transcription.
pub fn embed_text(text: &str, rp: &RewardModelParams) -> Result<Embedding> {
    let mut tape = Tape::new();
    let ids = bind_reward(&mut tape, rp);
    let e = text_tower_graph(&mut tape, &ids, &rp.config, text)?;
    Ok(Embedding { vector: tape.data(e).to_vec() })
}

/// Cosine similarity of audio and text embeddings in [−1, 1]; empty text
/// short-circuits to the configured penalty.
pub fn clap_reward(
    mel: &LogMelSpectrogram,
    text: &str,
    rp: &RewardModelParams,
    empty_penalty: f64,
) -> Result<f64> {
    if text.is_empty() {
        return Ok(empty_penalty);
    }
    Ok(embed_audio(mel, rp)?.cosine(&embed_text(text, rp)?))
}

/// Length-normalized trigram log-probability mapped through
/// `tanh(x/4 + 1.5)` so its scale matches the cosine channel.
pub fn lm_score(text: &str, lm: &TrigramLm, empty_penalty: f64) -> f64 {
    if text.is_empty() {
        return empty_penalty;
    }
    (lm.mean_log_prob(text) / 4.0 + 1.5).tanh()
}

/// Dispatch on the configured reward mode; `clap_plus_lm` blends
/// `(1−w)·clap + w·lm`.
pub fn combined_reward(
    mel: &LogMelSpectrogram,
    text: &str,
    rp: Option<&RewardModelParams>,
    lm: Option<&TrigramLm>,
    cfg: &RewardConfig,
) -> Result<f64> {
    cfg.validate()?;
    let need_clap = matches!(cfg.mode, RewardMode::Clap | RewardMode::ClapPlusLm);
    let need_lm = matches!(cfg.mode, RewardMode::Lm | RewardMode::ClapPlusLm);
    if need_clap && rp.is_none() {
        return Err(Error::Config(format!("reward mode {} requires a reward model", cfg.mode.as_str())));
    }
    if need_lm && lm.is_none() {
        return Err(Error::Config(format!("reward mode {} requires an n-gram LM", cfg.mode.as_str())));
    }
    match cfg.mode {
        RewardMode::Clap => clap_reward(mel, text, rp.unwrap(), cfg.empty_penalty),
        RewardMode::Lm => Ok(lm_score(text, lm.unwrap(), cfg.empty_penalty)),
        RewardMode::ClapPlusLm => {
            let c = clap_reward(mel, text, rp.unwrap(), cfg.empty_penalty)?;
            let l = lm_score(text, lm.unwrap(), cfg.empty_penalty);
            Ok((1.0 - cfg.lm_weight) * c + cfg.lm_weight * l)
        }
    }
}

/// Per-utterance scorer that embeds the audio once and scores any number
/// of candidate texts against it.
pub struct RewardScorer<'a> {
    cfg: RewardConfig,
    audio: Option<Embedding>,
    rp: Option<&'a RewardModelParams>,
    lm: Option<&'a TrigramLm>,
}

impl<'a> RewardScorer<'a> {
    pub fn new(
        mel: &LogMelSpectrogram,
        rp: Option<&'a RewardModelParams>,
        lm: Option<&'a TrigramLm>,
        cfg: RewardConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let need_clap = matches!(cfg.mode, RewardMode::Clap | RewardMode::ClapPlusLm);
        let need_lm = matches!(cfg.mode, RewardMode::Lm | RewardMode::ClapPlusLm);
        if need_clap && rp.is_none() {
            return Err(Error::Config("reward model required for this mode".into()));
        }
        if need_lm && lm.is_none() {
            return Err(Error::Config("n-gram LM required for this mode".into()));
        }
        let audio = if need_clap { Some(embed_audio(mel, rp.unwrap())?) } else { None };
        Ok(RewardScorer { cfg, audio, rp, lm })
    }

    pub fn score(&self, text: &str) -> Result<f64> {
        if text.is_empty() {
            return Ok(self.cfg.empty_penalty);
        }
        let clap = |s: &Self| -> Result<f64> {
            let t = embed_text(text, s.rp.unwrap())?;
            Ok(s.audio.as_ref().unwrap().cosine(&t))
        };
        match self.cfg.mode {
            RewardMode::Clap => clap(self),
            RewardMode::Lm => Ok(lm_score(text, self.lm.unwrap(), self.cfg.empty_penalty)),
            RewardMode::ClapPlusLm => {
                let c = clap(self)?;
                let l = lm_score(text, self.lm.unwrap(), self.cfg.empty_penalty);
                Ok((1.0 - self.cfg.lm_weight) * c + self.cfg.lm_weight * l)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{log_mel, synthesize, FrontendConfig};

    fn mel_of(text: &str, seed: u64) -> LogMelSpectrogram {
        log_mel(&synthesize(text, seed).unwrap(), &FrontendConfig::default()).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 1).unwrap();
        let mel = mel_of("caca", 2);
        let a1 = embed_audio(&mel, &rp).unwrap();
        let a2 = embed_audio(&mel, &rp).unwrap();
        assert_eq!(a1, a2);
        assert!((a1.norm() - 1.0).abs() < 1e-9);
        let t1 = embed_text("caca", &rp).unwrap();
        let t2 = embed_text("caca", &rp).unwrap();
        assert_eq!(t1, t2);
        assert!((t1.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_embeddings_give_cosine_one() {
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 3).unwrap();
        let t = embed_text("dada", &rp).unwrap();
        assert!((t.cosine(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_returns_penalty_without_towers() {
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 3).unwrap();
        let mel = mel_of("ha", 4);
        assert_eq!(clap_reward(&mel, "", &rp, -1.0).unwrap(), -1.0);
        let lm = TrigramLm::train(&["abab".to_string()]);
        assert_eq!(lm_score("", &lm, -1.0), -1.0);
    }

    #[test]
    fn clap_reward_is_bounded() {
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 5).unwrap();
        let mel = mel_of("gip", 6);
        for text in ["gip", "ha", "pppp", "a"] {
            let r = clap_reward(&mel, text, &rp, -1.0).unwrap();
            assert!((-1.0..=1.0).contains(&r), "reward {} out of range", r);
        }
    }

    #[test]
    fn combined_reward_mixing_rules() {
        let lm = TrigramLm::train(&["abab".into(), "cdcd".into()]);
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 7).unwrap();
        let mel = mel_of("abab", 8);
        let clap = clap_reward(&mel, "abab", &rp, -1.0).unwrap();
        let lms = lm_score("abab", &lm, -1.0);

        let mk = |mode, w| RewardConfig { mode, lm_weight: w, empty_penalty: -1.0 };
        let r0 = combined_reward(&mel, "abab", Some(&rp), Some(&lm), &mk(RewardMode::ClapPlusLm, 0.0))
            .unwrap();
        assert_eq!(r0, clap);
        let r1 = combined_reward(&mel, "abab", Some(&rp), Some(&lm), &mk(RewardMode::ClapPlusLm, 1.0))
            .unwrap();
        assert_eq!(r1, lms);
        let rh = combined_reward(&mel, "abab", Some(&rp), Some(&lm), &mk(RewardMode::ClapPlusLm, 0.5))
            .unwrap();
        assert!((rh - 0.5 * (clap + lms)).abs() < 1e-12);
    }

    #[test]
    fn half_and_half_arithmetic() {
        // w=0.5 with clap=0.4, lm=0.8 → 0.6 (checked through the formula).
        let w = 0.5;
        assert!(((1.0 - w) * 0.4 + w * 0.8 - 0.6f64).abs() < 1e-12);
    }

    #[test]
    fn missing_model_for_mode_is_config_error() {
        let mel = mel_of("ba", 9);
        let cfg = RewardConfig { mode: RewardMode::Clap, ..Default::default() };
        assert!(matches!(combined_reward(&mel, "ba", None, None, &cfg), Err(Error::Config(_))));
        let cfg = RewardConfig { mode: RewardMode::Lm, ..Default::default() };
        assert!(matches!(combined_reward(&mel, "ba", None, None, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn scorer_matches_direct_calls() {
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 11).unwrap();
        let lm = TrigramLm::train(&["abab".into(), "cbcb".into()]);
        let mel = mel_of("abab", 12);
        let cfg = RewardConfig { mode: RewardMode::ClapPlusLm, lm_weight: 0.5, empty_penalty: -1.0 };
        let scorer = RewardScorer::new(&mel, Some(&rp), Some(&lm), cfg).unwrap();
        let direct = combined_reward(&mel, "abab", Some(&rp), Some(&lm), &cfg).unwrap();
        assert_eq!(scorer.score("abab").unwrap(), direct);
        assert_eq!(scorer.score("").unwrap(), -1.0);
    }

    #[test]
    fn reward_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rp = RewardModelParams::init(&RewardTowerConfig::default(), 13).unwrap();
        let p = dir.path().join("r.ckpt");
        rp.save(&p).unwrap();
        let loaded = RewardModelParams::load(&p).unwrap();
        assert_eq!(rp, loaded);
    }
}
