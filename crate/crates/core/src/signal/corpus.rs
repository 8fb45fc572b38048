//! Corpus records and the line-oriented JSON corpus format.
//!
//! One record per line, each a flat JSON object
//! `{id, text, sample_rate, clean, noisy, noise_kind, snr_db, seed}`.
//! Floats carry 9 significant digits; sample buffers are quantized to the
//! same precision at generation time so in-memory and on-disk values agree
//! exactly and repeated runs are byte-identical.

use super::{add_noise, draw_text, synthesize, NoiseKind, NoiseSpec, Waveform};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use serde::Deserialize;
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

/// One corpus record. `seed` is the per-utterance seed: the voice is
/// regenerated with phase tag "voice" and the noise with "noise".
#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub sample_rate: u32,
    pub clean: Vec<f64>,
    pub noisy: Option<Vec<f64>>,
    pub noise_kind: Option<NoiseKind>,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Utterance {
    pub fn clean_wave(&self) -> Waveform {
        Waveform { samples: self.clean.clone(), sample_rate: self.sample_rate }
    }

    /// The waveform the test harness transcribes: noisy when present.
    pub fn input_wave(&self) -> Waveform {
        match &self.noisy {
            Some(n) => Waveform { samples: n.clone(), sample_rate: self.sample_rate },
            None => self.clean_wave(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub text_len: (usize, usize),
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Quantize to the file format's 9 significant digits.
fn q9(x: f64) -> f64 {
    format!("{:.8e}", x).parse().expect("q9 round trip")
}

fn fmt9(x: f64) -> String {
    format!("{:.8e}", x)
}

fn fmt_samples(samples: &[f64]) -> String {
    let mut s = String::with_capacity(samples.len() * 16);
    s.push('[');
    for (i, v) in samples.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt9(*v));
    }
    s.push(']');
    s
}

fn record_line(u: &Utterance) -> String {
    let noisy = match &u.noisy {
        Some(n) => fmt_samples(n),
        None => "null".to_string(),
    };
    let kind = match u.noise_kind {
        Some(k) => format!("\"{}\"", k.as_str()),
        None => "null".to_string(),
    };
    let snr = match u.snr_db {
        Some(v) => fmt9(v),
        None => "null".to_string(),
    };
    format!(
        "{{\"id\":\"{}\",\"text\":\"{}\",\"sample_rate\":{},\"clean\":{},\"noisy\":{},\"noise_kind\":{},\"snr_db\":{},\"seed\":{}}}",
        u.id,
        u.text,
        u.sample_rate,
        fmt_samples(&u.clean),
        noisy,
        kind,
        snr,
        u.seed
    )
}

/// Generate the train (clean-only) and test (clean + noisy) splits.
/// Train and test texts are disjoint as strings; everything is
/// deterministic given `cfg.seed`.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::Input("build_corpus: counts must be >= 1".into()));
    }
    let mut train_texts = Vec::with_capacity(cfg.n_train);
    let mut train_set = BTreeSet::new();
    for i in 0..cfg.n_train {
        let t = draw_text(cfg.text_len, derive_seed(cfg.seed, &format!("train-{}", i), "text"));
        train_set.insert(t.clone());
        train_texts.push(t);
    }

    let mut test_texts = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_test {
        let mut attempt = 0u64;
        let t = loop {
            let label = format!("test-{}-{}", i, attempt);
            let t = draw_text(cfg.text_len, derive_seed(cfg.seed, &label, "text"));
            if !train_set.contains(&t) {
                break t;
            }
            attempt += 1;
            if attempt > 10_000 {
                return Err(Error::Input(
                    "build_corpus: cannot draw test text disjoint from train".into(),
                ));
            }
        };
        test_texts.push(t);
    }

    let make = |id: String, text: &str, with_noise: bool| -> Result<Utterance> {
        let utt_seed = derive_seed(cfg.seed, &id, "utt");
        let wave = synthesize(text, derive_seed(utt_seed, &id, "voice"))?;
        let clean: Vec<f64> = wave.samples.iter().map(|&s| q9(s)).collect();
        let (noisy, noise_kind, snr_db) = if with_noise {
            let spec = NoiseSpec {
                kind: cfg.noise.kind,
                snr_db: cfg.noise.snr_db,
                seed: derive_seed(utt_seed, &id, "noise"),
            };
            let noisy = add_noise(&wave, &spec)?;
            let snr = if spec.snr_db.is_finite() { Some(q9(spec.snr_db)) } else { None };
            (Some(noisy.samples.iter().map(|&s| q9(s)).collect()), Some(spec.kind), snr)
        } else {
            (None, None, None)
        };
        Ok(Utterance {
            id,
            text: text.to_string(),
            sample_rate: wave.sample_rate,
            clean,
            noisy,
            noise_kind,
            snr_db,
            seed: utt_seed,
        })
    };

    let mut train = Vec::with_capacity(cfg.n_train);
    for (i, t) in train_texts.iter().enumerate() {
        train.push(make(format!("train-{:04}", i), t, false)?);
    }
    let mut test = Vec::with_capacity(cfg.n_test);
    for (i, t) in test_texts.iter().enumerate() {
        test.push(make(format!("test-{:04}", i), t, true)?);
    }
    Ok((train, test))
}

pub fn write_corpus(utts: &[Utterance], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utts {
        writeln!(f, "{}", record_line(u))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
