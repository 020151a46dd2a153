//! Synthetic two-source mixtures: amplitude-modulated multisine noise in two
//! disjoint frequency bands, one band per source.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Peak amplitude the mixture is normalised to.
pub const TOY_PEAK: f64 = 0.9;

const TONES_PER_SOURCE: usize = 24;

/// One training/evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMixture {
    pub mixture: Vec<f64>,
    pub sources: [Vec<f64>; 2],
    pub seed: u64,
    pub duration: f64,
    pub sample_rate: u32,
}

impl ToyMixture {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn references(&self) -> Vec<Vec<f64>> {
        self.sources.to_vec()
    }
}

fn band_source(rng: &mut ChaCha8Rng, lo: f64, hi: f64, len: usize, sr: f64) -> Vec<f64> {
    let tones: Vec<(f64, f64, f64)> = (0..TONES_PER_SOURCE)
        .map(|_| {
            let f = rng.gen_range(lo..hi);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.5..1.0);
            (2.0 * PI * f / sr, phase, amp)
        })
        .collect();
    let am_rate = 2.0 * PI * rng.gen_range(1.5..6.0) / sr;
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let depth = rng.gen_range(0.3..0.8);
    (0..len)
        .map(|n| {
            let t = n as f64;
            let carrier: f64 = tones.iter().map(|&(w, ph, a)| a * (w * t + ph).sin()).sum();
            let env = 1.0 - depth * 0.5 * (1.0 + (am_rate * t + am_phase).sin());
            carrier * env
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Low source in a 1 kHz-wide band centred in 500–1000 Hz, high source in a
/// 2 kHz-wide band centred in 3500–5000 Hz, mixed at a random level
/// difference of up to ±5 dB and scaled so the mixture peaks at [`TOY_PEAK`].
pub fn generate_toy_mixture(seed: u64, duration: f64, sample_rate: u32) -> Result<ToyMixture> {
    if duration.is_nan() || duration < 0.1 {
        return Err(Error::config("duration", format!("{duration} s is below 0.1 s")));
    }
    if sample_rate < 12_000 {
        return Err(Error::config("sample_rate", "toy bands need at least 12 kHz"));
    }
    let sr = f64::from(sample_rate);
    let len = (duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let c_lo = rng.gen_range(500.0..1000.0);
    let c_hi = rng.gen_range(3500.0..5000.0);
    let mut low = band_source(&mut rng, c_lo - 500.0, c_lo + 500.0, len, sr);
    let mut high = band_source(&mut rng, c_hi - 1000.0, c_hi + 1000.0, len, sr);

    let level_db: f64 = rng.gen_range(-5.0..5.0);
    let g_low = 10f64.powf(level_db / 40.0) / rms(&low);
    let g_high = 10f64.powf(-level_db / 40.0) / rms(&high);
    low.iter_mut().for_each(|v| *v *= g_low);
    high.iter_mut().for_each(|v| *v *= g_high);

    let peak = low
        .iter()
        .zip(&high)
        .map(|(a, b)| (a + b).abs())
        .chain(low.iter().chain(&high).map(|v| v.abs()))
        .fold(0.0, f64::max);
    let g = TOY_PEAK / peak;
    low.iter_mut().for_each(|v| *v *= g);
    high.iter_mut().for_each(|v| *v *= g);
    let mixture = low.iter().zip(&high).map(|(a, b)| a + b).collect();
    Ok(ToyMixture {
        mixture,
        sources: [low, high],
        seed,
        duration,
        sample_rate,
    })
}

/// Same sources with white noise added to the mixture at `snr_db` relative
/// to the mixture power; the result is rescaled (sources included) if the
/// noisy mixture would exceed unit peak.
pub fn generate_noisy_toy_mixture(seed: u64, duration: f64, sample_rate: u32, snr_db: f64) -> Result<ToyMixture> {
    let mut item = generate_toy_mixture(seed, duration, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006e_6f69_7365);
    let level = rms(&item.mixture) * 10f64.powf(-snr_db / 20.0) * 3f64.sqrt();
    for v in item.mixture.iter_mut() {
        *v += level * rng.gen_range(-1.0..1.0);
    }
    let peak = item.mixture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let g = TOY_PEAK / peak;
        item.mixture.iter_mut().for_each(|v| *v *= g);
        item.sources.iter_mut().flatten().for_each(|v| *v *= g);
    }
    Ok(item)
}

/// `count` items with seeds `base_seed, base_seed + 1, …`.
pub fn toy_dataset(base_seed: u64, count: usize, duration: f64, sample_rate: u32) -> Result<Vec<ToyMixture>> {
    (0..count as u64)
        .map(|i| generate_toy_mixture(base_seed.wrapping_add(i), duration, sample_rate))
        .collect()
}
