//! Synthetic signals shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use nmfhmm::{istft, stft, AudioClip, StftConfig};
use rand::Rng;

pub const RATE: u32 = 16000;

/// Voiced-like signal: segments of 0.15 to 0.4 s, each with its own
/// fundamental and one of a few fixed spectral envelopes, harmonics kept
/// inside 200 to 2000 Hz.
pub fn harmonic_speech<R: Rng>(rng: &mut R, seconds: f64) -> Vec<f64> {
    const ENVELOPES: [[f64; 2]; 4] = [[700.0, 1200.0], [300.0, 900.0], [500.0, 1700.0], [400.0, 1400.0]];
    let total = (seconds * RATE as f64) as usize;
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let len = ((rng.gen_range(0.15..0.4) * RATE as f64) as usize).min(total - out.len());
        let f0 = rng.gen_range(110.0..220.0);
        let env = ENVELOPES[rng.gen_range(0..ENVELOPES.len())];
        let level = rng.gen_range(0.3..1.0);
        let harmonics: Vec<(f64, f64, f64)> = (1..)
            .map(|h| h as f64 * f0)
            .take_while(|&f| f <= 2000.0)
            .filter(|&f| f >= 200.0)
            .map(|f| {
                let gain = env
                    .iter()
                    .map(|c| (-((f - c) / 150.0).powi(2)).exp())
                    .sum::<f64>()
                    + 0.05;
                (f, gain, rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        let ramp = (0.01 * RATE as f64) as usize;
        for i in 0..len {
            let t = i as f64 / RATE as f64;
            let edge = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
            let x: f64 = harmonics.iter().map(|(f, g, p)| g * (2.0 * PI * f * t + p).sin()).sum();
            out.push(0.1 * level * edge * x);
        }
    }
    out
}

/// Uniform white noise restricted to `[lo, hi]` Hz by zeroing STFT bins.
pub fn band_noise<R: Rng>(rng: &mut R, seconds: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = (seconds * RATE as f64) as usize;
    let white = AudioClip::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), RATE);
    let cfg = StftConfig::default();
    let mut spec = stft(&white, &cfg).unwrap();
    let hz_per_bin = RATE as f64 / cfg.frame_len as f64;
    for (k, mut row) in spec.complex_frames.rows_mut().into_iter().enumerate() {
        let f = k as f64 * hz_per_bin;
        if f < lo || f > hi {
            row.fill(num_complex::Complex64::new(0.0, 0.0));
        }
    }
    istft(&spec).unwrap().samples
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Scales `noise` so the mixture has the given SNR; returns the mixture.
pub fn mix(clean: &[f64], noise: &[f64], snr_db: f64) -> Vec<f64> {
    let scale = (energy(clean) / energy(noise) / 10f64.powf(snr_db / 10.0)).sqrt();
    clean.iter().zip(noise).map(|(s, n)| s + scale * n).collect()
}

pub fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip::new(samples, RATE)
}

pub fn magnitudes(samples: &[f64]) -> ndarray::Array2<f64> {
    stft(&clip(samples.to_vec()), &StftConfig::default()).unwrap().magnitudes
}
