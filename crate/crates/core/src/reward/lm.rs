//! Character trigram language model with add-0.1 smoothing.
//!
//! The text-only plausibility channel. Texts are wrapped in boundary
//! markers (`^^ ... $`) so end-of-text transitions are scored too.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

const START: u8 = b'^';
const STOP: u8 = b'$';
const SMOOTHING: f64 = 0.1;
/// Next-symbol alphabet: 16 corpus symbols plus the stop marker.
const NEXT_VOCAB: f64 = 17.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrigramLm {
    /// Trigram → count, keys over `{a..p, ^, $}`.
    counts: BTreeMap<[u8; 3], u64>,
    /// Context (first two bytes) → total count, derived from `counts`.
    context_totals: BTreeMap<[u8; 2], u64>,
}

fn padded(text: &str) -> Vec<u8> {
    let mut s = Vec::with_capacity(text.len() + 3);
    s.push(START);
    s.push(START);
    s.extend_from_slice(text.as_bytes());
    s.push(STOP);
    s
}

impl TrigramLm {
    pub fn train(texts: &[String]) -> Self {
        let mut counts: BTreeMap<[u8; 3], u64> = BTreeMap::new();
        for t in texts {
            let s = padded(t);
            for w in s.windows(3) {
                *counts.entry([w[0], w[1], w[2]]).or_insert(0) += 1;
            }
        }
        let mut lm = TrigramLm { counts, context_totals: BTreeMap::new() };
        lm.rebuild_totals();
        lm
    }

    fn rebuild_totals(&mut self) {
        self.context_totals.clear();
        for (k, c) in &self.counts {
            *self.context_totals.entry([k[0], k[1]]).or_insert(0) += c;
        }
    }

    /// `ln P(c3 | c1 c2)` with add-0.1 smoothing.
    pub fn log_prob(&self, c1: u8, c2: u8, c3: u8) -> f64 {
        let tri = *self.counts.get(&[c1, c2, c3]).unwrap_or(&0) as f64;
        let ctx = *self.context_totals.get(&[c1, c2]).unwrap_or(&0) as f64;
        ((tri + SMOOTHING) / (ctx + SMOOTHING * NEXT_VOCAB)).ln()
    }

    /// Length-normalized log-probability of a text, including the
    /// end-of-text transition.
    pub fn mean_log_prob(&self, text: &str) -> f64 {
        let s = padded(text);
        let n = s.len() - 2;
        let total: f64 = s.windows(3).map(|w| self.log_prob(w[0], w[1], w[2])).sum();
        total / n as f64
    }

    /// Serialize as sorted `(trigram, count)` text lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, c) in &self.counts {
            writeln!(f, "{} {}", std::str::from_utf8(k).expect("ascii trigram"), c)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut counts = BTreeMap::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (tri, count) = line
                .split_once(' ')
                .ok_or_else(|| Error::Input(format!("bad n-gram line {:?}", line)))?;
            let bytes = tri.as_bytes();
            if bytes.len() != 3 {
                return Err(Error::Input(format!("bad trigram {:?}", tri)));
            }
            let c: u64 =
                count.parse().map_err(|_| Error::Input(format!("bad count {:?}", count)))?;
            counts.insert([bytes[0], bytes[1], bytes[2]], c);
        }
        let mut lm = TrigramLm { counts, context_totals: BTreeMap::new() };
        lm.rebuild_totals();
        Ok(lm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::signal::draw_text;
    use rand::Rng;

    #[test]
    fn probabilities_normalize_over_next_symbols() {
        let lm = TrigramLm::train(&["abab".into(), "abad".into(), "cb".into()]);
        // Σ_c P(c | "ab") over the 16 symbols and '$' must be 1.
        let mut total = 0.0;
        for c in "abcdefghijklmnop".bytes().chain(std::iter::once(b'$')) {
            total += lm.log_prob(b'a', b'b', c).exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
    }

    #[test]
    fn save_load_round_trip_and_determinism() {
        let texts: Vec<String> = (0..50).map(|i| draw_text((3, 8), i)).collect();
        let lm = TrigramLm::train(&texts);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("lm1.txt");
        lm.save(&p1).unwrap();
        let back = TrigramLm::load(&p1).unwrap();
        assert_eq!(lm, back);
        let p2 = dir.path().join("lm2.txt");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn in_distribution_text_beats_uniform_random() {
        // Sampling oracle: ≥95% of 1000 pairs must favor the text that
        // came from the corpus generator.
        let train: Vec<String> = (0..400).map(|i| draw_text((4, 9), 10_000 + i)).collect();
        let lm = TrigramLm::train(&train);
        let mut rng = rng_from_seed(99);
        let alpha: Vec<char> = "abcdefghijklmnop".chars().collect();
        let mut wins = 0;
        let n = 1000;
        for i in 0..n {
            let good = draw_text((4, 9), 50_000 + i as u64);
            let random: String =
                (0..good.len()).map(|_| alpha[rng.gen_range(0..16)]).collect();
            if lm.mean_log_prob(&good) > lm.mean_log_prob(&random) {
                wins += 1;
            }
        }
        assert!(wins >= 950, "in-distribution text won only {}/{}", wins, n);
    }
}
