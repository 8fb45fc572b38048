//! Hann-windowed STFT and triangular mel filterbank.

use super::Waveform;
use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

/// Log-energy floor added before the natural log.
pub const MEL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { window: 256, hop: 128, n_mels: 26, fmin_hz: 0.0, fmax_hz: 4000.0 }
    }
}

/// `F` mel bins × `T` frames of log energies, stored frame-major
/// (`data[frame * n_mels + mel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn bin(&self, frame: usize, mel: usize) -> f64 {
        self.data[frame * self.n_mels + mel]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.n_mels..(frame + 1) * self.n_mels]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Hz positions of the `n_mels + 2` mel-spaced points spanning
/// [fmin, fmax]; filter `i` is the triangle over points `i, i+1, i+2`.
fn mel_points(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Center frequency (Hz) of each mel filter.
pub fn mel_filter_centers(cfg: &FrontendConfig) -> Vec<f64> {
    mel_points(cfg)[1..=cfg.n_mels].to_vec()
}

/// Triangular weights per filter over the one-sided FFT bins, peak 1.
fn filterbank(cfg: &FrontendConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let pts = mel_points(cfg);
    let n_bins = cfg.window / 2 + 1;
    let bin_hz = sample_rate as f64 / cfg.window as f64;
    (0..cfg.n_mels)
        .map(|i| {
            let (left, center, right) = (pts[i], pts[i + 1], pts[i + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

// rustfft's planner caches plans internally; share one per process.
static PLANNER: Mutex<Option<FftPlanner<f64>>> = Mutex::new(None);

fn fft_forward(buf: &mut [Complex<f64>]) {
    let fft = {
        let mut guard = PLANNER.lock().expect("fft planner lock");
        guard.get_or_insert_with(FftPlanner::new).plan_fft_forward(buf.len())
    };
    fft.process(buf);
}

/// Hann-windowed STFT power spectrum through the triangular mel
/// filterbank, then `ln(energy + 1e-10)`.
///
/// Frame count is `1 + (len − window) / hop`; errors if the waveform is
/// shorter than one window.
pub fn log_mel(wave: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    let n = cfg.window;
    if wave.len() < n {
        return Err(Error::Input(format!(
            "log_mel: waveform of {} samples is shorter than one window ({})",
            wave.len(),
            n
        )));
    }
    let n_frames = 1 + (wave.len() - n) / cfg.hop;
    let bank = filterbank(cfg, wave.sample_rate);
    let hann: Vec<f64> =
        (0..n).map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos())).collect();

    let mut out = vec![0.0; n_frames * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for frame in 0..n_frames {
        let start = frame * cfg.hop;
        for i in 0..n {
            buf[i] = Complex::new(wave.samples[start + i] * hann[i], 0.0);
        }
        fft_forward(&mut buf);
        let power: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (m, filt) in bank.iter().enumerate() {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[frame * cfg.n_mels + m] = (energy + MEL_FLOOR).ln();
        }
    }
    Ok(LogMelSpectrogram { n_mels: cfg.n_mels, n_frames, data: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize, SAMPLE_RATE};

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 1024]);
        let s = log_mel(&w, &FrontendConfig::default()).unwrap();
        for &v in &s.data {
            assert_eq!(v, MEL_FLOOR.ln());
        }
    }

    #[test]
    fn frame_count_formula() {
        let w = Waveform::new(vec![0.1; 640]);
        let s = log_mel(&w, &FrontendConfig::default()).unwrap();
        assert_eq!(s.n_frames, 1 + (640 - 256) / 128);
        assert_eq!(s.n_frames, 4);
        assert_eq!(s.n_mels, 26);
    }

    #[test]
    fn too_short_is_input_error() {
        let w = Waveform::new(vec![0.1; 255]);
        assert!(matches!(log_mel(&w, &FrontendConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn pure_tone_peaks_at_nearest_filter_center() {
        // Filterbank-center oracle: every frame's argmax bin must be the
        // filter whose center is nearest the tone frequency.
        let cfg = FrontendConfig::default();
        let centers = mel_filter_centers(&cfg);
        for tone_hz in [1000.0, 440.0, 2500.0] {
            let samples: Vec<f64> = (0..2048)
                .map(|t| (std::f64::consts::TAU * tone_hz * t as f64 / SAMPLE_RATE as f64).sin())
                .collect();
            let s = log_mel(&Waveform::new(samples), &cfg).unwrap();
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (*a - tone_hz).abs().partial_cmp(&(*b - tone_hz).abs()).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            for frame in 0..s.n_frames {
                let row = s.frame(frame);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                assert_eq!(
                    argmax, nearest,
                    "tone {} Hz frame {}: argmax {} nearest {}",
                    tone_hz, frame, argmax, nearest
                );
            }
        }
    }

    #[test]
    fn hop_delay_shifts_frames() {
        // Shift covariance: prepending one hop of silence shifts frames by
        // exactly one; boundary frame excluded.
        let cfg = FrontendConfig::default();
        let w = synthesize("cab", 11).unwrap();
        let s0 = log_mel(&w, &cfg).unwrap();
        let mut delayed = vec![0.0; cfg.hop];
        delayed.extend_from_slice(&w.samples);
        let s1 = log_mel(&Waveform::new(delayed), &cfg).unwrap();
        assert_eq!(s1.n_frames, s0.n_frames + 1);
        for f in 0..s0.n_frames {
            assert_eq!(s0.frame(f), s1.frame(f + 1), "frame {}", f);
        }
    }

    #[test]
    fn log_mel_is_deterministic() {
        let w = synthesize("pomp", 13).unwrap();
        let a = log_mel(&w, &FrontendConfig::default()).unwrap();
        let b = log_mel(&w, &FrontendConfig::default()).unwrap();
        assert_eq!(a.data, b.data);
    }
}
