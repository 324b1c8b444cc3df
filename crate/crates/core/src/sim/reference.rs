//! Farm power reference `P_ref[k] = (base + gamma * dP[k]) * P_greedy`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    File(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSignal {
    /// Farm power reference in W.
    pub samples: Vec<f64>,
    /// Normalized regulation signal in [-1, 1].
    pub normalized: Vec<f64>,
    pub gamma: f64,
    pub base: f64,
    pub greedy_power: f64,
    pub source: ReferenceSource,
}

impl ReferenceSignal {
    pub fn from_normalized(normalized: Vec<f64>, gamma: f64, base: f64, greedy_power: f64, source: ReferenceSource) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::validation("gamma", "must be non-negative"));
        }
        if !(greedy_power > 0.0) {
            return Err(Error::validation("greedy_power", "must be positive"));
        }
        let samples = normalized.iter().map(|d| (base + gamma * d) * greedy_power).collect();
        Ok(ReferenceSignal {
            samples,
            normalized,
            gamma,
            base,
            greedy_power,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `P_ref[k+1 ..= k+h]`, holding the last sample past the end.
    pub fn window(&self, k: usize, h: usize) -> Vec<f64> {
        let last = self.samples.len() - 1;
        (k + 1..=k + h).map(|t| self.samples[t.min(last)]).collect()
    }

    /// First sample at which the reference exceeds greedy power.
    pub fn first_exceedance(&self) -> Option<usize> {
        self.samples.iter().position(|&p| p > self.greedy_power)
    }
}

/// Synthetic stand-in for a regulation signal: a few slow sinusoids plus
/// low-pass filtered noise, faded in over the first 100 samples so the run
/// starts at the base level, and scaled so its largest value is exactly 1.
pub fn synthetic_signal(samples: usize, seed: u64) -> Vec<f64> {
    const FADE: f64 = 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let period = rng.gen_range(100.0..400.0);
            let amp = rng.gen_range(0.3..1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (period, amp, phase)
        })
        .collect();
    let pole: f64 = (-1.0f64 / 20.0).exp();
    let mut noise = 0.0;
    let mut raw: Vec<f64> = (0..samples)
        .map(|k| {
            let t = k as f64;
            noise = pole * noise + (1.0 - pole) * rng.gen_range(-1.0..1.0);
            let tone: f64 = tones.iter().map(|(p, a, ph)| a * (2.0 * PI * t / p + ph).sin()).sum();
            let s = (t / FADE).min(1.0);
            let fade = s * s * (3.0 - 2.0 * s);
            fade * (tone + 2.0 * noise)
        })
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    if -min > max {
        raw.iter_mut().for_each(|v| *v = -*v);
    }
    let peak = max.max(-min);
    if peak > 0.0 {
        raw.iter_mut().for_each(|v| *v /= peak);
    }
    raw
}

/// Parses one value per line (blank lines and `#` comments skipped) and
/// divides by the largest magnitude.
pub fn parse_signal(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::Ingestion {
            line: n + 1,
            reason: format!("not a number: {t:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Ingestion {
                line: n + 1,
                reason: "value is not finite".into(),
            });
        }
        out.push(v);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(out)
}

pub fn load_signal(path: &Path, samples: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
        line: 0,
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    let values = parse_signal(&text)?;
    if values.len() < samples {
        return Err(Error::Ingestion {
            line: text.lines().count() + 1,
            reason: format!("{} samples, {samples} needed", values.len()),
        });
    }
    Ok(values[..samples].to_vec())
}

pub fn load_or_generate_reference(
    file: Option<&Path>,
    gamma: f64,
    base: f64,
    greedy_power: f64,
    samples: usize,
    seed: u64,
) -> Result<ReferenceSignal> {
    let (normalized, source) = match file {
        Some(p) => (load_signal(p, samples)?, ReferenceSource::File(p.to_path_buf())),
        None => (synthetic_signal(samples, seed), ReferenceSource::Synthetic { seed }),
    };
    ReferenceSignal::from_normalized(normalized, gamma, base, greedy_power, source)
}
