//! Supervised pretraining of the transcriber: teacher-forced
//! cross-entropy with SGD-with-momentum, gated on held-out clean
//! exact-match accuracy.

use super::forward::{bind_model, encoder_graph, sequence_log_prob_graph, ModelIds};
use super::{text_to_tokens, DecodeConfig, Decoder, ModelParams, EOS};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rng::rng_from_seed;
use crate::signal::{log_mel, FrontendConfig, LogMelSpectrogram, Utterance};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_exact_match: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 3e-3,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 200,
            target_exact_match: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCurvePoint {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_exact_match: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<TrainCurvePoint>,
    pub gate_reached: bool,
    pub final_exact_match: f64,
}

/// Gradients for every model tensor in canonical order (zeros where no
/// gradient reached a leaf).
pub fn collect_model_grads(tape: &Tape, ids: &ModelIds) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    ids.for_each(&mut |_, id| {
        out.push(match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).numel()],
        });
    });
    out
}

/// `p -= lr * g` over the canonical tensor order. With `freeze_encoder`,
/// encoder-side tensors (input projection and encoder stack) are skipped.
pub fn apply_sgd(params: &mut ModelParams, grads: &[Vec<f64>], lr: f64, freeze_encoder: bool) {
    let mut cursor = 0usize;
    params.for_each_mut(&mut |name, t| {
        let g = &grads[cursor];
        cursor += 1;
        if freeze_encoder && (name.starts_with("in_proj") || name.starts_with("enc")) {
            return;
        }
        debug_assert_eq!(g.len(), t.data.len(), "grad shape drift at {}", name);
        for (p, gi) in t.data.iter_mut().zip(g) {
            *p -= lr * gi;
        }
    });
}

/// Mean per-token cross-entropy loss and its gradients for one sample.
fn sample_loss_and_grads(
    params: &ModelParams,
    mel: &LogMelSpectrogram,
    targets: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let ids = bind_model(&mut tape, params);
    let h = encoder_graph(&mut tape, &ids, &params.config, mel)?;
    let lp = sequence_log_prob_graph(&mut tape, &ids.decoder(), &params.config, h, targets, None)?;
    let loss = tape.scale(lp, -1.0 / targets.len() as f64)?;
    let loss_val = tape.data(loss)[0];
    tape.backward(loss)?;
    Ok((loss_val, collect_model_grads(&tape, &ids)))
}

fn exact_match_rate(params: &ModelParams, mels: &[(LogMelSpectrogram, String)]) -> f64 {
    let cfg = DecodeConfig { max_len: params.config.max_len, ..Default::default() };
    let hits = par_map(mels, |(mel, text)| {
        let dec = match Decoder::new(mel, params) {
            Ok(d) => d,
            Err(_) => return 0usize,
        };
        match dec.greedy(None, &cfg) {
            Ok(h) if h.text() == *text => 1usize,
            _ => 0usize,
        }
    });
    hits.iter().sum::<usize>() as f64 / mels.len().max(1) as f64
}

/// Teacher-forced pretraining until held-out clean exact match reaches
/// the gate or the epoch cap. Per-sample gradients within a batch may be
/// computed in parallel; the reduction order is fixed, so results are
/// bit-identical for any thread count.
pub fn pretrain(
    train: &[Utterance],
    holdout: &[Utterance],
    params: &mut ModelParams,
    cfg: &PretrainConfig,
    frontend: &FrontendConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Input("pretrain: empty train split".into()));
    }
    if frontend.n_mels != params.config.mel_bins {
        return Err(Error::Config(format!(
            "frontend.n_mels {} vs model.mel_bins {}",
            frontend.n_mels, params.config.mel_bins
        )));
    }

    // Features and targets are fixed; compute once.
    let train_data: Vec<(LogMelSpectrogram, Vec<usize>)> = {
        let prepared = par_map(train, |u| {
            let mel = log_mel(&u.clean_wave(), frontend)?;
            let mut targets = text_to_tokens(&u.text);
            targets.push(EOS);
            Ok::<_, Error>((mel, targets))
        });
        prepared.into_iter().collect::<Result<_>>()?
    };
    let holdout_data: Vec<(LogMelSpectrogram, String)> = {
        let prepared = par_map(holdout, |u| {
            Ok::<_, Error>((log_mel(&u.clean_wave(), frontend)?, u.text.clone()))
        });
        prepared.into_iter().collect::<Result<_>>()?
    };

    let mut velocity: Vec<Vec<f64>> = {
        let mut v = Vec::new();
        params.for_each(&mut |_, t| v.push(vec![0.0; t.numel()]));
        v
    };

    let mut curve = Vec::new();
    let mut rng = rng_from_seed(cfg.seed);
    let mut em = 0.0;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let idx: Vec<usize> = chunk.to_vec();
            let results = par_map(&idx, |&i| {
                let (mel, targets) = &train_data[i];
                sample_loss_and_grads(params, mel, targets)
            });
            let mut batch_grads: Option<Vec<Vec<f64>>> = None;
            let mut n = 0usize;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                n += 1;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.iter_mut().zip(g) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            let scale = 1.0 / n as f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            // v ← m·v + g ; p ← p − lr·v
            for (v, g) in velocity.iter_mut().zip(&grads) {
                for (vv, gv) in v.iter_mut().zip(g) {
                    *vv = cfg.momentum * *vv + gv;
                }
            }
            apply_sgd(params, &velocity, cfg.lr, false);
        }

        em = exact_match_rate(params, &holdout_data);
        curve.push(TrainCurvePoint {
            epoch,
            mean_loss: loss_sum / train_data.len() as f64,
            holdout_exact_match: em,
        });
        if em >= cfg.target_exact_match {
            return Ok(TrainOutcome { curve, gate_reached: true, final_exact_match: em });
        }
    }
    Ok(TrainOutcome { curve, gate_reached: false, final_exact_match: em })
}
