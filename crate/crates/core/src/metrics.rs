//! Objective quality measures: clamped segmental SNR and log-spectral
//! distortion. Both frame the signals with the STFT frame length and hop.

use std::fmt::Write as _;

use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::spectral::{self, SpectralError, StftConfig};

pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEIL_DB: f64 = 35.0;
/// Magnitude floor inside the log-spectral distortion.
pub const LSD_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("lengths differ by {diff} samples (tolerance {tolerance})")]
    LengthMismatch { diff: usize, tolerance: usize },
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("empty signal")]
    Empty,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seg_snr_db: f64,
    pub lsd_db: f64,
    pub per_frame_seg_snr: Option<Vec<f64>>,
    /// Scores merged in from external tools, kept in insertion order.
    pub external: Vec<(String, String)>,
}

impl EvalReport {
    /// One `key=value` per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seg_snr_db={}", self.seg_snr_db);
        let _ = writeln!(out, "lsd_db={}", self.lsd_db);
        for (k, v) in &self.external {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["seg_snr_db".to_string(), "lsd_db".to_string()];
        cols.extend(self.external.iter().map(|(k, _)| k.clone()));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.seg_snr_db.to_string(), self.lsd_db.to_string()];
        cols.extend(self.external.iter().map(|(_, v)| v.clone()));
        cols.join(",")
    }
}

/// Returns the common length after checking rates and the length tolerance
/// (one STFT frame).
fn aligned_len(reference: &AudioClip, test: &AudioClip, tolerance: usize) -> Result<usize, MetricsError> {
    if reference.sample_rate_hz != test.sample_rate_hz {
        return Err(MetricsError::RateMismatch(reference.sample_rate_hz, test.sample_rate_hz));
    }
    let diff = reference.len().abs_diff(test.len());
    if diff > tolerance {
        return Err(MetricsError::LengthMismatch { diff, tolerance });
    }
    let len = reference.len().min(test.len());
    if len == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(len)
}

fn frame_starts(len: usize, frame_len: usize, hop: usize) -> Vec<usize> {
    if len <= frame_len {
        return vec![0];
    }
    (0..=(len - frame_len) / hop).map(|i| i * hop).collect()
}

/// Per-frame SNR in dB, each clamped to `[-10, 35]`.
pub fn segmental_snr_frames(reference: &AudioClip, test: &AudioClip, cfg: &StftConfig) -> Result<Vec<f64>, MetricsError> {
    cfg.validate()?;
    let len = aligned_len(reference, test, cfg.frame_len)?;
    let (r, t) = (&reference.samples[..len], &test.samples[..len]);
    let frames = frame_starts(len, cfg.frame_len, cfg.hop)
        .into_iter()
        .map(|start| {
            let end = (start + cfg.frame_len).min(len);
            let mut signal = 0.0;
            let mut noise = 0.0;
            for i in start..end {
                signal += r[i] * r[i];
                let e = r[i] - t[i];
                noise += e * e;
            }
            let db = if noise == 0.0 {
                SEG_SNR_CEIL_DB
            } else if signal == 0.0 {
                SEG_SNR_FLOOR_DB
            } else {
                10.0 * (signal / noise).log10()
            };
            db.clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB)
        })
        .collect();
    Ok(frames)
}

/// Mean of the clamped per-frame SNRs.
pub fn segmental_snr(reference: &AudioClip, test: &AudioClip, cfg: &StftConfig) -> Result<f64, MetricsError> {
    let frames = segmental_snr_frames(reference, test, cfg)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

/// RMS over frames of the per-frame RMS log-magnitude difference in dB.
pub fn log_spectral_distortion(reference: &AudioClip, test: &AudioClip, cfg: &StftConfig) -> Result<f64, MetricsError> {
    let len = aligned_len(reference, test, cfg.frame_len)?;
    let r = AudioClip::new(reference.samples[..len].to_vec(), reference.sample_rate_hz);
    let t = AudioClip::new(test.samples[..len].to_vec(), test.sample_rate_hz);
    let rs = spectral::stft(&r, cfg)?;
    let ts = spectral::stft(&t, cfg)?;
    let mut total = 0.0;
    for (rc, tc) in rs.magnitudes.columns().into_iter().zip(ts.magnitudes.columns()) {
        let mut frame = 0.0;
        for (a, b) in rc.iter().zip(tc.iter()) {
            let d = 20.0 * (a.max(LSD_FLOOR).log10() - b.max(LSD_FLOOR).log10());
            frame += d * d;
        }
        total += frame / rc.len() as f64;
    }
    Ok((total / rs.frames() as f64).sqrt())
}

pub fn evaluate(reference: &AudioClip, test: &AudioClip, cfg: &StftConfig, per_frame: bool) -> Result<EvalReport, MetricsError> {
    let frames = segmental_snr_frames(reference, test, cfg)?;
    let seg_snr_db = frames.iter().sum::<f64>() / frames.len() as f64;
    let lsd_db = log_spectral_distortion(reference, test, cfg)?;
    Ok(EvalReport {
        seg_snr_db,
        lsd_db,
        per_frame_seg_snr: per_frame.then_some(frames),
        external: Vec::new(),
    })
}
