//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames are taken with a periodic Hann window, transformed with a real FFT
//! whose size equals the frame length, and stored as one-sided spectra of
//! `frame_len / 2 + 1` bins. The signal tail is zero-padded so that the last
//! sample falls inside a whole frame. Synthesis applies the same window again
//! and divides by the per-sample sum of squared windows.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("input clip is empty")]
    EmptyInput,
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("spectrogram inconsistent with its configuration: {0}")]
    ConfigMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

impl Window {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 1024,
            hop: 512,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(frame_len: usize, hop: usize) -> Result<Self, SpectralError> {
        let cfg = Self {
            frame_len,
            hop,
            window: Window::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(SpectralError::InvalidConfig(format!(
                "frame length {} must be even and at least 2",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.frame_len % self.hop != 0 {
            return Err(SpectralError::InvalidConfig(format!(
                "hop {} must divide frame length {}",
                self.hop, self.frame_len
            )));
        }
        Ok(())
    }

    /// One-sided bin count.
    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Length after tail padding: at least one frame, and a whole number of
    /// hops past the first frame.
    pub fn padded_len(&self, len: usize) -> usize {
        if len <= self.frame_len {
            return self.frame_len;
        }
        let extra = len - self.frame_len;
        self.frame_len + extra.div_ceil(self.hop) * self.hop
    }

    pub fn frame_count(&self, len: usize) -> usize {
        1 + (self.padded_len(len) - self.frame_len) / self.hop
    }
}

/// Complex one-sided STFT together with its magnitude matrix (bins × frames).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub complex_frames: Array2<Complex64>,
    pub magnitudes: Array2<f64>,
    pub config: StftConfig,
    /// Length of the analysed signal before padding.
    pub signal_len: usize,
    pub sample_rate_hz: u32,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.complex_frames.nrows()
    }

    pub fn frames(&self) -> usize {
        self.complex_frames.ncols()
    }

    /// Scales every bin by a real gain, keeping the phase.
    pub fn apply_gain(&self, gains: &Array2<f64>) -> Result<Spectrogram, SpectralError> {
        if gains.dim() != self.complex_frames.dim() {
            return Err(SpectralError::ConfigMismatch(format!(
                "gain shape {:?} != spectrogram shape {:?}",
                gains.dim(),
                self.complex_frames.dim()
            )));
        }
        let complex_frames = ndarray::Zip::from(&self.complex_frames)
            .and(gains)
            .map_collect(|c, &g| c * g);
        let magnitudes = complex_frames.mapv(|c| c.norm());
        Ok(Spectrogram {
            complex_frames,
            magnitudes,
            config: self.config,
            signal_len: self.signal_len,
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Keeps only the first `n` frames.
    pub fn truncate_frames(&self, n: usize) -> Spectrogram {
        let n = n.min(self.frames());
        let complex_frames = self.complex_frames.slice(ndarray::s![.., ..n]).to_owned();
        let magnitudes = self.magnitudes.slice(ndarray::s![.., ..n]).to_owned();
        let signal_len = self
            .signal_len
            .min(self.config.frame_len + n.saturating_sub(1) * self.config.hop);
        Spectrogram {
            complex_frames,
            magnitudes,
            config: self.config,
            signal_len,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

struct Plans {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

fn plans(frame_len: usize) -> Plans {
    let mut planner = RealFftPlanner::<f64>::new();
    Plans {
        forward: planner.plan_fft_forward(frame_len),
        inverse: planner.plan_fft_inverse(frame_len),
    }
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram, SpectralError> {
    cfg.validate()?;
    if clip.samples.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    let padded_len = cfg.padded_len(clip.samples.len());
    let mut padded = clip.samples.clone();
    padded.resize(padded_len, 0.0);

    let n_frames = cfg.frame_count(clip.samples.len());
    let bins = cfg.bins();
    let window = cfg.window.coefficients(cfg.frame_len);
    let fft = plans(cfg.frame_len).forward;

    let mut complex_frames = Array2::<Complex64>::zeros((bins, n_frames));
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    for (n, mut column) in complex_frames.axis_iter_mut(Axis(1)).enumerate() {
        let start = n * cfg.hop;
        for (dst, (x, w)) in input
            .iter_mut()
            .zip(padded[start..start + cfg.frame_len].iter().zip(&window))
        {
            *dst = x * w;
        }
        fft.process(&mut input, &mut output)
            .expect("buffer sizes come from the plan");
        for (dst, src) in column.iter_mut().zip(&output) {
            *dst = *src;
        }
    }
    let magnitudes = complex_frames.mapv(|c| c.norm());
    Ok(Spectrogram {
        complex_frames,
        magnitudes,
        config: *cfg,
        signal_len: clip.samples.len(),
        sample_rate_hz: clip.sample_rate_hz,
    })
}

/// Smallest summed squared window over one hop once every sample is
/// covered by `frame_len / hop` frames.
fn steady_state_power(window: &[f64], hop: usize) -> f64 {
    (0..hop)
        .map(|t| window.iter().skip(t).step_by(hop).map(|w| w * w).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

pub fn istft(spec: &Spectrogram) -> Result<AudioClip, SpectralError> {
    let cfg = spec.config;
    cfg.validate()
        .map_err(|e| SpectralError::ConfigMismatch(e.to_string()))?;
    if spec.bins() != cfg.bins() {
        return Err(SpectralError::ConfigMismatch(format!(
            "{} bins, frame length {} implies {}",
            spec.bins(),
            cfg.frame_len,
            cfg.bins()
        )));
    }
    if spec.magnitudes.dim() != spec.complex_frames.dim() {
        return Err(SpectralError::ConfigMismatch(
            "magnitude and complex frame shapes differ".into(),
        ));
    }
    let n_frames = spec.frames();
    if n_frames == 0 {
        return Err(SpectralError::EmptyInput);
    }

    let total = cfg.frame_len + (n_frames - 1) * cfg.hop;
    let window = cfg.window.coefficients(cfg.frame_len);
    let ifft = plans(cfg.frame_len).inverse;
    let scale = 1.0 / cfg.frame_len as f64;

    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut input = ifft.make_input_vec();
    let mut frame = ifft.make_output_vec();
    for (n, column) in spec.complex_frames.axis_iter(Axis(1)).enumerate() {
        for (dst, src) in input.iter_mut().zip(column.iter()) {
            *dst = *src;
        }
        // DC and Nyquist of a real signal carry no imaginary part.
        input[0].im = 0.0;
        let last = input.len() - 1;
        input[last].im = 0.0;
        ifft.process(&mut input, &mut frame)
            .expect("buffer sizes come from the plan");
        let start = n * cfg.hop;
        for (i, (x, w)) in frame.iter().zip(&window).enumerate() {
            out[start + i] += x * scale * w;
            norm[start + i] += w * w;
        }
    }
    // Edge samples are covered by fewer frames than interior ones, so their
    // window power can get arbitrarily small. Clamping it at the interior
    // minimum leaves the interior exact and fades the edges out instead of
    // amplifying whatever a gain left there.
    let floor = steady_state_power(&window, cfg.hop);
    for (x, wsum) in out.iter_mut().zip(&norm) {
        *x /= wsum.max(floor);
    }
    out.truncate(spec.signal_len.min(total));
    Ok(AudioClip::new(out, spec.sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 16000)
    }

    fn random_clip(seed: u64, len: usize) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        clip((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn default_config() {
        let cfg = StftConfig::default();
        assert_eq!((cfg.frame_len, cfg.hop, cfg.bins()), (1024, 512, 513));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(StftConfig::new(1024, 300).is_err());
        assert!(StftConfig::new(1023, 1).is_err());
        assert!(StftConfig::new(1024, 0).is_err());
        assert!(StftConfig::new(1024, 256).is_ok());
    }

    #[test]
    fn empty_input() {
        assert_eq!(
            stft(&clip(vec![]), &StftConfig::default()).unwrap_err(),
            SpectralError::EmptyInput
        );
    }

    #[test]
    fn zero_clip_gives_zero_magnitudes() {
        let spec = stft(&clip(vec![0.0; 5000]), &StftConfig::default()).unwrap();
        assert!(spec.magnitudes.iter().all(|&m| m == 0.0));
        let back = istft(&spec).unwrap();
        assert_eq!(back.samples, vec![0.0; 5000]);
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        let spec = stft(&clip(vec![0.1; 1024]), &cfg).unwrap();
        assert_eq!(spec.frames(), 1);
        assert_eq!(spec.bins(), 513);
        assert_eq!(cfg.frame_count(1025), 2);
        assert_eq!(cfg.frame_count(1536), 2);
        assert_eq!(cfg.frame_count(1537), 3);
        assert_eq!(cfg.frame_count(10), 1);
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let k = 37;
        let f0 = k as f64 * 16000.0 / cfg.frame_len as f64;
        let x: Vec<f64> = (0..16000)
            .map(|t| (2.0 * PI * f0 * t as f64 / 16000.0).sin())
            .collect();
        let spec = stft(&clip(x), &cfg).unwrap();
        // the last frame overlaps the zero-padded tail
        for n in 0..spec.frames() - 1 {
            let col = spec.magnitudes.column(n);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, k, "frame {n}");
            // periodic Hann: a unit sinusoid on bin k has |X_k| = L/4
            assert!((col[k] - cfg.frame_len as f64 / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn magnitudes_are_moduli() {
        let spec = stft(&random_clip(3, 4000), &StftConfig::default()).unwrap();
        for (c, m) in spec.complex_frames.iter().zip(&spec.magnitudes) {
            assert_eq!(c.norm(), *m);
        }
    }

    #[test]
    fn halving_frames_halves_output() {
        let x = random_clip(11, 16000);
        let cfg = StftConfig::default();
        let spec = stft(&x, &cfg).unwrap();
        let gains = Array2::from_elem(spec.magnitudes.dim(), 0.5);
        let y = istft(&spec.apply_gain(&gains).unwrap()).unwrap();
        let edge = cfg.frame_len - cfg.hop;
        for t in edge..x.len() - edge {
            assert!((y.samples[t] - 0.5 * x.samples[t]).abs() <= 1e-6);
        }
    }

    #[test]
    fn istft_rejects_inconsistent_bins() {
        let mut spec = stft(&random_clip(1, 2048), &StftConfig::default()).unwrap();
        spec.config.frame_len = 512;
        spec.config.hop = 256;
        assert!(matches!(istft(&spec), Err(SpectralError::ConfigMismatch(_))));
    }

    #[test]
    fn truncation_keeps_leading_frames() {
        let spec = stft(&random_clip(2, 8000), &StftConfig::default()).unwrap();
        let short = spec.truncate_frames(4);
        assert_eq!(short.frames(), 4);
        assert_eq!(short.signal_len, 1024 + 3 * 512);
        assert_eq!(
            short.complex_frames,
            spec.complex_frames.slice(ndarray::s![.., ..4])
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn round_trip_interior(seed in any::<u64>(), len in 1024usize..20000) {
            let cfg = StftConfig::default();
            let x = random_clip(seed, len);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            prop_assert_eq!(y.len(), x.len());
            let edge = cfg.frame_len - cfg.hop;
            for t in edge..len.saturating_sub(edge) {
                prop_assert!((y.samples[t] - x.samples[t]).abs() <= 1e-6);
            }
        }
    }
}
