use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nmfhmm::enhancer::EnhanceOutput;
use nmfhmm::metrics;
use nmfhmm::model_store;
use nmfhmm::trainer::TrainOutput;
use nmfhmm::{CompositeModel, EnhanceConfig, HmmNmfModel, SourceRole, StftConfig, TrainConfig};

use crate::{manifest, EnhanceArgs, EvalArgs, InspectArgs, TrainArgs};

/// Magnitude spectrograms of every input, in order.
pub fn load_magnitudes(paths: &[PathBuf], stft: &StftConfig) -> Result<Vec<ndarray::Array2<f64>>> {
    paths
        .iter()
        .map(|p| {
            let clip = nmfhmm::read_wav(p)?;
            let spec = nmfhmm::stft(&clip, stft).with_context(|| p.display().to_string())?;
            Ok(spec.magnitudes)
        })
        .collect()
}

pub fn train_on(paths: &[PathBuf], cfg: &TrainConfig) -> Result<TrainOutput> {
    let specs = load_magnitudes(paths, &cfg.stft)?;
    Ok(nmfhmm::train(&specs, cfg)?)
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,loglik\n");
    for (i, ll) in trace.iter().enumerate() {
        let _ = writeln!(out, "{},{ll:.17e}", i + 1);
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let inputs = manifest::collect(&a.inputs, &a.manifests)?;
    let (states, basis) = match a.role {
        SourceRole::Speech => (a.states_speech, a.basis_speech),
        SourceRole::Noise => (a.states_noise, a.basis_noise),
    };
    let cfg = TrainConfig {
        states,
        basis,
        iterations: a.train_iters,
        seed: a.seed,
        tolerance: a.tolerance,
        parallel: a.parallel,
        role: a.role,
        stft: a.stft.config()?,
        ..TrainConfig::default()
    };
    let output = train_on(&inputs, &cfg)?;
    model_store::save(&output.model, &a.out)?;
    let trace_path = a.trace.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    write(&trace_path, &trace_csv(&output.trace))
}

pub fn load_pair(speech: &Path, noise: &Path) -> Result<CompositeModel> {
    let speech = load_role(speech, SourceRole::Speech)?;
    let noise = load_role(noise, SourceRole::Noise)?;
    Ok(CompositeModel::new(speech, noise)?)
}

fn load_role(path: &Path, role: SourceRole) -> Result<HmmNmfModel> {
    let model = model_store::load(path)?;
    if model.meta.role != role {
        bail!("{}: expected a {role} model, found a {} model", path.display(), model.meta.role);
    }
    Ok(model)
}

pub fn gain_csv(out: &EnhanceOutput) -> String {
    let mut text = String::new();
    for frame in out.gains.columns() {
        let row: Vec<String> = frame.iter().map(|g| g.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

pub fn enhance(a: EnhanceArgs) -> Result<()> {
    let model = load_pair(&a.speech_model, &a.noise_model)?;
    let noisy = nmfhmm::read_wav(&a.input)?;
    let cfg = EnhanceConfig {
        mu_iterations: a.enhance_iters,
        parallel: a.parallel,
        min_gain: a.min_gain,
        ..EnhanceConfig::default()
    };
    let out = nmfhmm::enhance(&noisy, &model, &a.stft.config()?, &cfg)
        .with_context(|| format!("enhancing {}", a.input.display()))?;
    nmfhmm::write_wav(&out.clip, &a.out)?;
    if let Some(path) = &a.gain_dump {
        write(path, &gain_csv(&out))?;
    }
    Ok(())
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
fn read_scores(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), i + 1);
        };
        scores.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(scores)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let reference = nmfhmm::read_wav(&a.reference)?;
    let test = nmfhmm::read_wav(&a.test)?;
    let mut report = metrics::evaluate(&reference, &test, &a.stft.config()?, a.per_frame.is_some())
        .with_context(|| format!("comparing {} with {}", a.test.display(), a.reference.display()))?;
    for path in &a.external {
        report.external.extend(read_scores(path)?);
    }
    if let (Some(path), Some(frames)) = (&a.per_frame, &report.per_frame_seg_snr) {
        let text: String = frames.iter().map(|v| format!("{v}\n")).collect();
        write(path, &text)?;
    }
    if a.csv {
        println!("{}\n{}", report.csv_header(), report.csv_row());
    } else {
        print!("{}", report.to_key_values());
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let m = model_store::load(&a.model)?;
    let j = m.num_states();
    let stay = (0..j).map(|i| m.chain.transitions[[i, i]]).sum::<f64>() / j as f64;
    println!("schema_version={}", model_store::SCHEMA_VERSION);
    println!("role={}", m.meta.role);
    println!("states={j}");
    println!("basis={}", m.basis_count());
    println!("bins={}", m.bins());
    println!("seed={}", m.meta.seed);
    println!("iterations={}", m.meta.iterations);
    println!("frame_len={}", m.meta.stft.frame_len);
    println!("hop={}", m.meta.stft.hop);
    println!("created={}", m.meta.created.as_deref().unwrap_or("-"));
    println!("mean_self_transition={stay}");
    Ok(())
}
