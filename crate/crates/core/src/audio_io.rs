//! Single-channel PCM WAV input and output.
//!
//! Everything downstream runs at 16 kHz. Reading a file at any other rate is
//! an error unless the caller opts out through [`ReadOptions`]; no resampling
//! is performed.

use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use thiserror::Error;

/// Sample rate every pipeline entry point expects.
pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("no such file: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRateMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: file contains no samples")]
    Empty { path: PathBuf },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Accept files whose rate differs from [`PIPELINE_SAMPLE_RATE`].
    pub allow_any_rate: bool,
}

/// Reads the first channel of a PCM WAV file, enforcing the 16 kHz rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    read_wav_with(path, ReadOptions::default())
}

pub fn read_wav_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::MissingFile(path.to_path_buf()));
    }
    let reader = WavReader::open(path).map_err(|e| classify(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "floating-point samples".into(),
        });
    }
    if !opts.allow_any_rate && spec.sample_rate != PIPELINE_SAMPLE_RATE {
        return Err(AudioError::SampleRateMismatch {
            path: path.to_path_buf(),
            found: spec.sample_rate,
            expected: PIPELINE_SAMPLE_RATE,
        });
    }

    let channels = spec.channels.max(1) as usize;
    let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
    let mut samples = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.into_samples::<i32>().enumerate() {
        let s = s.map_err(|e| classify(path, e))?;
        if i % channels == 0 {
            samples.push(s as f64 * scale);
        }
    }
    if samples.is_empty() {
        return Err(AudioError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a 16-bit PCM mono file. Samples outside `[-1, 1]` are hard-clipped.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io_err = |source| AudioError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &clip.samples {
        writer.write_sample(quantize_i16(s)).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

/// Maps `[-1, 1]` onto the 16-bit grid with step 2^-15, clipping `+1.0` to
/// the largest representable code.
pub fn quantize_i16(sample: f64) -> i16 {
    let s = if sample.is_nan() { 0.0 } else { sample.clamp(-1.0, 1.0) };
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn classify(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::FormatError(msg) => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: msg.to_string(),
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "unsupported WAV variant".into(),
        },
        other => AudioError::IoFailure {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const QUANT: f64 = 1.0 / 32768.0;

    /// Hand-rolled RIFF writer so the reader is checked against an
    /// encoder it does not share code with.
    fn raw_wav(channels: u16, rate: u32, frames: &[Vec<i16>]) -> Vec<u8> {
        let data_len = (frames.len() * channels as usize * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        out.extend_from_slice(&(channels * 2).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for frame in frames {
            for s in frame {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn reads_mono_16k() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mono.wav");
        let frames: Vec<Vec<i16>> = (0..16000).map(|i| vec![(i % 200) as i16 - 100]).collect();
        std::fs::write(&path, raw_wav(1, 16000, &frames)).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 16000);
        assert_eq!(clip.sample_rate_hz, 16000);
        assert_eq!(clip.samples[0], -100.0 * QUANT);
    }

    #[test]
    fn rejects_44k_without_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cd.wav");
        std::fs::write(&path, raw_wav(1, 44100, &[vec![0], vec![1]])).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(AudioError::SampleRateMismatch { found: 44100, .. })
        ));
        let clip = read_wav_with(&path, ReadOptions { allow_any_rate: true }).unwrap();
        assert_eq!(clip.sample_rate_hz, 44100);
    }

    #[test]
    fn stereo_keeps_channel_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let frames: Vec<Vec<i16>> = (0..500i16).map(|i| vec![i * 7, -i * 3]).collect();
        std::fs::write(&path, raw_wav(2, 16000, &frames)).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.len(), 500);
        for (i, s) in clip.samples.iter().enumerate() {
            assert_eq!(*s, frames[i][0] as f64 * QUANT);
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            read_wav("/nonexistent/never.wav"),
            Err(AudioError::MissingFile(_))
        ));
    }

    #[test]
    fn float_wav_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("float.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(AudioError::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&AudioClip::new(vec![0.0; 100], 16000), &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples, vec![0.0; 100]);
    }

    #[test]
    fn full_scale_and_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.wav");
        write_wav(&AudioClip::new(vec![1.0, -1.0, 3.0, -7.5], 16000), &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert!((back.samples[0] - 1.0).abs() <= QUANT);
        assert_eq!(back.samples[1], -1.0);
        assert!((back.samples[2] - 1.0).abs() <= QUANT);
        assert_eq!(back.samples[3], -1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_within_quantization(seed in any::<u64>(), len in 1usize..4000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.wav");
            write_wav(&AudioClip::new(samples.clone(), 16000), &path).unwrap();
            let back = read_wav(&path).unwrap();
            prop_assert_eq!(back.len(), len);
            for (a, b) in samples.iter().zip(&back.samples) {
                prop_assert!((a - b).abs() <= QUANT);
            }
        }
    }
}
