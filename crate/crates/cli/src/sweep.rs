//! Grid search over model sizes. Every grid point trains its own models,
//! enhances each noisy test file and averages the scores. A failing point
//! is reported in its row and the sweep moves on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nmfhmm::metrics;
use nmfhmm::{AudioClip, CompositeModel, EnhanceConfig, HmmNmfModel, SourceRole, StftConfig, TrainConfig};

use crate::commands::train_on;
use crate::{manifest, SweepArgs};

pub const HEADER: &str =
    "states_speech,states_noise,basis_speech,basis_noise,seg_snr_in_db,seg_snr_out_db,seg_snr_gain_db,lsd_out_db,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Size {
    states: usize,
    basis: usize,
}

struct Scores {
    seg_in: f64,
    seg_out: f64,
    lsd_out: f64,
}

struct Sweep {
    speech_train: Vec<PathBuf>,
    noise_train: Vec<PathBuf>,
    tests: Vec<(AudioClip, AudioClip)>,
    stft: StftConfig,
    train_iters: usize,
    enhance_iters: usize,
    seed: u64,
    parallel: bool,
    cache: HashMap<(SourceRole, Size), Result<HmmNmfModel, String>>,
}

impl Sweep {
    fn model(&mut self, role: SourceRole, size: Size) -> Result<HmmNmfModel, String> {
        if let Some(m) = self.cache.get(&(role, size)) {
            return m.clone();
        }
        let cfg = TrainConfig {
            states: size.states,
            basis: size.basis,
            iterations: self.train_iters,
            seed: self.seed,
            parallel: self.parallel,
            role,
            stft: self.stft,
            ..TrainConfig::default()
        };
        let inputs = match role {
            SourceRole::Speech => &self.speech_train,
            SourceRole::Noise => &self.noise_train,
        };
        let result = train_on(inputs, &cfg)
            .map(|out| out.model)
            .map_err(|e| format!("{role} model: {e:#}"));
        self.cache.insert((role, size), result.clone());
        result
    }

    fn point(&mut self, speech: Size, noise: Size) -> Result<Scores, String> {
        let model = CompositeModel::new(self.model(SourceRole::Speech, speech)?, self.model(SourceRole::Noise, noise)?)
            .map_err(|e| e.to_string())?;
        let cfg = EnhanceConfig {
            mu_iterations: self.enhance_iters,
            parallel: self.parallel,
            ..EnhanceConfig::default()
        };
        let (mut seg_in, mut seg_out, mut lsd_out) = (0.0, 0.0, 0.0);
        for (clean, noisy) in &self.tests {
            let out = nmfhmm::enhance(noisy, &model, &self.stft, &cfg).map_err(|e| e.to_string())?;
            seg_in += metrics::segmental_snr(clean, noisy, &self.stft).map_err(|e| e.to_string())?;
            seg_out += metrics::segmental_snr(clean, &out.clip, &self.stft).map_err(|e| e.to_string())?;
            lsd_out += metrics::log_spectral_distortion(clean, &out.clip, &self.stft).map_err(|e| e.to_string())?;
        }
        let n = self.tests.len() as f64;
        Ok(Scores {
            seg_in: seg_in / n,
            seg_out: seg_out / n,
            lsd_out: lsd_out / n,
        })
    }
}

fn row(speech: Size, noise: Size, scores: &Result<Scores, String>) -> String {
    let sizes = format!("{},{},{},{}", speech.states, noise.states, speech.basis, noise.basis);
    match scores {
        Ok(s) => format!(
            "{sizes},{},{},{},{},ok",
            s.seg_in,
            s.seg_out,
            s.seg_out - s.seg_in,
            s.lsd_out
        ),
        // keep the row a fixed column count
        Err(e) => format!("{sizes},,,,,error: {}", e.replace([',', '\n'], ";")),
    }
}

pub fn run(a: SweepArgs) -> Result<()> {
    let stft = a.stft.config()?;
    let clean = manifest::read(&a.test_clean)?;
    let noisy = manifest::read(&a.test_noisy)?;
    if clean.len() != noisy.len() {
        bail!(
            "{} lists {} files but {} lists {}",
            a.test_clean.display(),
            clean.len(),
            a.test_noisy.display(),
            noisy.len()
        );
    }
    let tests = clean
        .iter()
        .zip(&noisy)
        .map(|(c, n)| Ok((nmfhmm::read_wav(c)?, nmfhmm::read_wav(n)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut sweep = Sweep {
        speech_train: manifest::read(&a.speech_train)?,
        noise_train: manifest::read(&a.noise_train)?,
        tests,
        stft,
        train_iters: a.train_iters,
        enhance_iters: a.enhance_iters,
        seed: a.seed,
        parallel: a.parallel,
        cache: HashMap::new(),
    };

    let mut table = String::from(HEADER);
    table.push('\n');
    for &js in &a.states_speech {
        for &jn in &a.states_noise {
            for &ks in &a.basis_speech {
                for &kn in &a.basis_noise {
                    let speech = Size { states: js, basis: ks };
                    let noise = Size { states: jn, basis: kn };
                    let scores = sweep.point(speech, noise);
                    if let Err(e) = &scores {
                        eprintln!("warning: grid point J={js}/{jn} K={ks}/{kn} failed: {e}");
                    }
                    let _ = writeln!(table, "{}", row(speech, noise, &scores));
                }
            }
        }
    }
    match &a.out {
        Some(path) => fs::write(path, table).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
