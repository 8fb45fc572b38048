//! Symmetric batch-contrastive training of the audio–text towers.

use super::{audio_tower_graph, bind_reward, text_tower_graph, RewardIds, RewardModelParams};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rng::{derive_seed, rng_from_seed};
use crate::signal::{add_noise, log_mel, FrontendConfig, LogMelSpectrogram, NoiseKind, NoiseSpec, Utterance};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_retrieval: f64,
    /// Fraction of utterances duplicated as noisy-audio copies.
    pub noisy_fraction: f64,
    pub noisy_snr_db: f64,
    /// Fraction of pairs held out for the retrieval gate.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig {
            lr: 0.02,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 60,
            target_retrieval: 0.85,
            noisy_fraction: 0.3,
            noisy_snr_db: 10.0,
            holdout_fraction: 0.125,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardCurvePoint {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_retrieval_at_1: f64,
}

#[derive(Debug, Clone)]
pub struct RewardTrainOutcome {
    pub curve: Vec<RewardCurvePoint>,
    pub gate_reached: bool,
    pub final_retrieval: f64,
}

fn collect_reward_grads(tape: &Tape, ids: &RewardIds) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    ids.for_each(&mut |_, id| {
        out.push(match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).numel()],
        });
    });
    out
}

fn apply_sgd(params: &mut RewardModelParams, grads: &[Vec<f64>], lr: f64) {
    let mut cursor = 0usize;
    params.for_each_mut(&mut |_, t| {
        for (p, g) in t.data.iter_mut().zip(&grads[cursor]) {
            *p -= lr * g;
        }
        cursor += 1;
    });
}

/// Symmetric cross-entropy over the batch cosine-similarity matrix scaled
/// by the learnable temperature. Returns (loss value, gradients).
fn batch_loss_and_grads(
    params: &RewardModelParams,
    batch: &[(LogMelSpectrogram, String)],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Input("contrastive batch size must be >= 2".into()));
    }
    let mut tape = Tape::new();
    let ids = bind_reward(&mut tape, params);

    let mut audio = None;
    let mut text = None;
    for (mel, txt) in batch {
        let a = audio_tower_graph(&mut tape, &ids, &params.config, mel)?;
        let t = text_tower_graph(&mut tape, &ids, &params.config, txt)?;
        audio = Some(match audio {
            None => a,
            Some(acc) => tape.concat_rows(acc, a)?,
        });
        text = Some(match text {
            None => t,
            Some(acc) => tape.concat_rows(acc, t)?,
        });
    }
    let (audio, text) = (audio.unwrap(), text.unwrap());
    let diag: Vec<usize> = (0..b).collect();

    // audio → text direction
    let sim_at = tape.matmul_nt(audio, text)?;
    let sim_at = tape.scale_by_scalar(sim_at, ids.logit_scale)?;
    let ls_at = tape.log_softmax_rows(sim_at)?;
    let d_at = tape.select_per_row(ls_at, &diag)?;
    let l_at = tape.sum_all(d_at)?;

    // text → audio direction
    let sim_ta = tape.matmul_nt(text, audio)?;
    let sim_ta = tape.scale_by_scalar(sim_ta, ids.logit_scale)?;
    let ls_ta = tape.log_softmax_rows(sim_ta)?;
    let d_ta = tape.select_per_row(ls_ta, &diag)?;
    let l_ta = tape.sum_all(d_ta)?;

    let sum = tape.add(l_at, l_ta)?;
    let loss = tape.scale(sum, -0.5 / b as f64)?;
    let loss_val = tape.data(loss)[0];
    tape.backward(loss)?;
    Ok((loss_val, collect_reward_grads(&tape, &ids)))
}

/// Top-1 retrieval accuracy of matched texts for held-out audio.
pub fn retrieval_at_1(
    params: &RewardModelParams,
    pairs: &[(LogMelSpectrogram, String)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let texts: Vec<super::Embedding> = {
        let r = par_map(pairs, |(_, t)| super::embed_text(t, params));
        r.into_iter().collect::<Result<_>>()?
    };
    let audios: Vec<super::Embedding> = {
        let r = par_map(pairs, |(m, _)| super::embed_audio(m, params));
        r.into_iter().collect::<Result<_>>()?
    };
    let mut hits = 0usize;
    for (i, a) in audios.iter().enumerate() {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, t) in texts.iter().enumerate() {
            let s = a.cosine(t);
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Train the towers on clean (audio, transcript) pairs plus a fraction of
/// noisy-audio copies; stops when held-out retrieval@1 reaches the gate.
pub fn train_contrastive(
    train: &[Utterance],
    params: &mut RewardModelParams,
    cfg: &RewardTrainConfig,
    frontend: &FrontendConfig,
) -> Result<RewardTrainOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::Input("reward training batch size must be >= 2".into()));
    }
    if train.len() < 8 {
        return Err(Error::Input("reward training needs at least 8 utterances".into()));
    }

    let n_holdout = ((train.len() as f64 * cfg.holdout_fraction) as usize).max(4);
    let (train_utts, holdout_utts) = train.split_at(train.len() - n_holdout);

    let mut rng = rng_from_seed(cfg.seed);
    let mut pairs: Vec<(LogMelSpectrogram, String)> = {
        let r = par_map(train_utts, |u| {
            Ok::<_, Error>((log_mel(&u.clean_wave(), frontend)?, u.text.clone()))
        });
        r.into_iter().collect::<Result<_>>()?
    };
    // Noisy copies for robustness, noise kinds rotating deterministically.
    let n_noisy = (train_utts.len() as f64 * cfg.noisy_fraction) as usize;
    let mut noisy_idx: Vec<usize> = (0..train_utts.len()).collect();
    noisy_idx.shuffle(&mut rng);
    noisy_idx.truncate(n_noisy);
    for (j, &i) in noisy_idx.iter().enumerate() {
        let u = &train_utts[i];
        let spec = NoiseSpec {
            kind: NoiseKind::ALL[j % 3],
            snr_db: cfg.noisy_snr_db,
            seed: derive_seed(cfg.seed, &u.id, "reward-noise"),
        };
        let noisy = add_noise(&u.clean_wave(), &spec)?;
        pairs.push((log_mel(&noisy, frontend)?, u.text.clone()));
    }

    let holdout: Vec<(LogMelSpectrogram, String)> = {
        let r = par_map(holdout_utts, |u| {
            Ok::<_, Error>((log_mel(&u.clean_wave(), frontend)?, u.text.clone()))
        });
        r.into_iter().collect::<Result<_>>()?
    };

    let mut velocity: Vec<Vec<f64>> = {
        let mut v = Vec::new();
        params.for_each(&mut |_, t| v.push(vec![0.0; t.numel()]));
        v
    };

    let mut curve = Vec::new();
    let mut retrieval = 0.0;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(LogMelSpectrogram, String)> =
                chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grads) = batch_loss_and_grads(params, &batch)?;
            loss_sum += loss;
            n_batches += 1;
            for (v, g) in velocity.iter_mut().zip(&grads) {
                for (vv, gv) in v.iter_mut().zip(g) {
                    *vv = cfg.momentum * *vv + gv;
                }
            }
            apply_sgd(params, &velocity, cfg.lr);
        }
        retrieval = retrieval_at_1(params, &holdout)?;
        curve.push(RewardCurvePoint {
            epoch,
            mean_loss: loss_sum / n_batches.max(1) as f64,
            holdout_retrieval_at_1: retrieval,
        });
        if retrieval >= cfg.target_retrieval {
            return Ok(RewardTrainOutcome { curve, gate_reached: true, final_retrieval: retrieval });
        }
    }
    Ok(RewardTrainOutcome { curve, gate_reached: false, final_retrieval: retrieval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardTowerConfig;
    use crate::signal::{build_corpus, CorpusConfig};

    #[test]
    fn initial_contrastive_loss_is_near_ln_batch() {
        // Uniform-similarity expectation: each direction costs ln(B).
        let (train, _) = build_corpus(&CorpusConfig {
            n_train: 16,
            n_test: 1,
            text_len: (3, 6),
            noise: NoiseSpec { kind: NoiseKind::Gaussian, snr_db: 10.0, seed: 0 },
            seed: 7,
        })
        .unwrap();
        let frontend = FrontendConfig::default();
        let params = RewardModelParams::init(&RewardTowerConfig::default(), 1).unwrap();
        let batch: Vec<(LogMelSpectrogram, String)> = train
            .iter()
            .map(|u| (log_mel(&u.clean_wave(), &frontend).unwrap(), u.text.clone()))
            .collect();
        let (loss, _) = batch_loss_and_grads(&params, &batch).unwrap();
        let expect = (batch.len() as f64).ln();
        assert!(
            (loss - expect).abs() / expect < 0.10,
            "init loss {} vs ln(B) {}",
            loss,
            expect
        );
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (train, _) = build_corpus(&CorpusConfig {
            n_train: 2,
            n_test: 1,
            text_len: (3, 4),
            noise: NoiseSpec { kind: NoiseKind::Gaussian, snr_db: 10.0, seed: 0 },
            seed: 8,
        })
        .unwrap();
        let frontend = FrontendConfig::default();
        let params = RewardModelParams::init(&RewardTowerConfig::default(), 1).unwrap();
        let pair = (log_mel(&train[0].clean_wave(), &frontend).unwrap(), train[0].text.clone());
        assert!(matches!(batch_loss_and_grads(&params, &[pair]), Err(Error::Input(_))));
    }
}
