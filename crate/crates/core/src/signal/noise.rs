//! Additive noise families and exact-SNR mixing.

use super::Waveform;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Three synthetic noise families standing in for recorded noise corpora:
/// stationary (gaussian), competing-speech-like (tonal babble of six
/// wandering tones), and transient (impulse bursts).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    TonalBabble,
    ImpulseBursts,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Gaussian, NoiseKind::TonalBabble, NoiseKind::ImpulseBursts];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::TonalBabble => "tonal_babble",
            NoiseKind::ImpulseBursts => "impulse_bursts",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "tonal_babble" => Ok(NoiseKind::TonalBabble),
            "impulse_bursts" => Ok(NoiseKind::ImpulseBursts),
            other => Err(Error::Input(format!("unknown noise kind {:?}", other))),
        }
    }
}

/// Noise family, target SNR in dB (`f64::INFINITY` = no-noise mode), and
/// the PRNG seed the noise is regenerated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub snr_db: f64,
    pub seed: u64,
}

/// Generate the unscaled noise signal for a spec. Exposed so tests can
/// recompute component powers independently of [`add_noise`].
pub fn noise_signal(kind: NoiseKind, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    match kind {
        NoiseKind::Gaussian => (0..len).map(|_| crate::autodiff::standard_normal(&mut rng)).collect(),
        NoiseKind::TonalBabble => {
            let sr = super::SAMPLE_RATE as f64;
            let mut out = vec![0.0; len];
            for _ in 0..6 {
                let f0: f64 = rng.gen_range(150.0f64.ln()..3500.0f64.ln()).exp();
                let amp: f64 = rng.gen_range(0.5..1.0);
                let lfo_hz: f64 = rng.gen_range(0.3..2.0);
                let lfo_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut phase = phase0;
                for (t, o) in out.iter_mut().enumerate() {
                    let ts = t as f64 / sr;
                    // instantaneous frequency wanders ±10% at the LFO rate
                    let f = f0 * (1.0 + 0.1 * (std::f64::consts::TAU * lfo_hz * ts + lfo_phase).sin());
                    phase += std::f64::consts::TAU * f / sr;
                    *o += amp * phase.sin();
                }
            }
            out
        }
        NoiseKind::ImpulseBursts => {
            let mut out = vec![0.0; len];
            let n_bursts = (len / 2000).max(2);
            for _ in 0..n_bursts {
                let blen = rng.gen_range(80..320usize).min(len);
                let start = rng.gen_range(0..len.saturating_sub(blen).max(1));
                let tau = blen as f64 / 3.0;
                for i in 0..blen {
                    let decay = (-(i as f64) / tau).exp();
                    out[start + i] += decay * crate::autodiff::standard_normal(&mut rng);
                }
            }
            out
        }
    }
}

/// Scale `noise` so that `10·log10(P_signal/P_noise)` equals `snr_db`.
pub fn scale_to_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    let p_signal = clean.iter().map(|s| s * s).sum::<f64>() / clean.len() as f64;
    if p_signal <= 0.0 {
        return Err(Error::Input("add_noise: clean signal has zero power".into()));
    }
    let p_noise = noise.iter().map(|s| s * s).sum::<f64>() / noise.len() as f64;
    if p_noise <= 0.0 {
        return Err(Error::Input("add_noise: generated noise has zero power".into()));
    }
    let target = p_signal / 10.0f64.powf(snr_db / 10.0);
    let k = (target / p_noise).sqrt();
    Ok(noise.iter().map(|s| s * k).collect())
}

/// Mix noise into `clean` at the spec's SNR and re-peak-normalize to
/// [−1, 1]. `snr_db = +∞` is the no-noise sentinel: the input is returned
/// unchanged. Deterministic given `spec.seed`.
pub fn add_noise(clean: &Waveform, spec: &NoiseSpec) -> Result<Waveform> {
    if clean.is_empty() {
        return Err(Error::Input("add_noise: empty waveform".into()));
    }
    if spec.snr_db.is_infinite() && spec.snr_db > 0.0 {
        return Ok(clean.clone());
    }
    if !spec.snr_db.is_finite() {
        return Err(Error::Input(format!("add_noise: bad snr {}", spec.snr_db)));
    }
    let noise = noise_signal(spec.kind, clean.len(), spec.seed);
    let scaled = scale_to_snr(&clean.samples, &noise, spec.snr_db)?;
    let mut mixed: Vec<f64> = clean.samples.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    let peak = mixed.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in mixed.iter_mut() {
            *s /= peak;
        }
    }
    Ok(Waveform::new(mixed))
}
