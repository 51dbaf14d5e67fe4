//! Online MMSE enhancement with a composite speech × noise chain.
//!
//! For every frame and every composite state the stacked basis
//! `[W̄ Ẅ]` is fitted to the noisy magnitudes by a fixed number of KL
//! multiplicative updates starting from all-ones activations. The fitted
//! rates give the state's Poisson likelihood and its Wiener-like speech
//! share `p = W̄h̄ / (W̄h̄ + Ẅḧ)`. A forward filtering step turns the
//! likelihoods into state weights `ω`, the gain is `Σ ω p`, and the clean
//! magnitude estimate is the noisy magnitude times the gain. Only past
//! frames enter the forward state, so the estimate is causal.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::hmm_core::{self, ChainParams, CompositeIndex, ForwardState, HmmError};
use crate::kl_nmf::{self, NmfError, EPSILON};
use crate::spectral::{self, SpectralError, StftConfig};
use crate::trainer::HmmNmfModel;

#[derive(Debug, Error, PartialEq)]
pub enum EnhanceError {
    #[error("model dimension mismatch: {0}")]
    ModelDimensionMismatch(String),
    #[error("invalid enhancement configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Chain(#[from] HmmError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceConfig {
    /// Multiplicative updates per frame and state.
    pub mu_iterations: usize,
    pub epsilon: f64,
    /// Evaluate composite states on the rayon pool.
    pub parallel: bool,
    /// Lower bound applied to the final gain; zero leaves it untouched.
    pub min_gain: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            mu_iterations: 15,
            epsilon: EPSILON,
            parallel: false,
            min_gain: 0.0,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if self.mu_iterations == 0 {
            return Err(EnhanceError::InvalidConfig("at least one update per frame is required".into()));
        }
        if !(0.0..=1.0).contains(&self.min_gain) {
            return Err(EnhanceError::InvalidConfig(format!(
                "minimum gain {} outside [0, 1]",
                self.min_gain
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(EnhanceError::InvalidConfig(format!("floor {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Speech and noise models joined into one chain over state pairs.
#[derive(Debug, Clone)]
pub struct CompositeModel {
    pub speech: HmmNmfModel,
    pub noise: HmmNmfModel,
    pub chain: ChainParams,
    /// `[W̄^s Ẅ^m]` for every pair, in flattened composite order.
    pub stacked_bases: Vec<Array2<f64>>,
}

impl CompositeModel {
    pub fn new(speech: HmmNmfModel, noise: HmmNmfModel) -> Result<Self, EnhanceError> {
        if speech.bins() != noise.bins() {
            return Err(EnhanceError::ModelDimensionMismatch(format!(
                "speech model has {} bins, noise model {}",
                speech.bins(),
                noise.bins()
            )));
        }
        for (name, m) in [("speech", &speech), ("noise", &noise)] {
            if m.bases.len() != m.num_states() || m.bins() == 0 || m.basis_count() == 0 {
                return Err(EnhanceError::ModelDimensionMismatch(format!(
                    "{name} model has {} bases for {} states",
                    m.bases.len(),
                    m.num_states()
                )));
            }
        }
        let chain = hmm_core::kronecker_compose(&speech.chain, &noise.chain);
        let jn = noise.num_states();
        let stacked_bases = (0..chain.num_states())
            .map(|c| {
                let idx = CompositeIndex::unflatten(c, jn);
                concatenate![Axis(1), speech.bases[idx.speech], noise.bases[idx.noise]]
            })
            .collect();
        Ok(Self {
            speech,
            noise,
            chain,
            stacked_bases,
        })
    }

    pub fn num_states(&self) -> usize {
        self.chain.num_states()
    }

    pub fn bins(&self) -> usize {
        self.speech.bins()
    }

    pub fn speech_atoms(&self) -> usize {
        self.speech.basis_count()
    }

    pub fn index(&self, flat: usize) -> CompositeIndex {
        CompositeIndex::unflatten(flat, self.noise.num_states())
    }

    fn stacked(&self, state: CompositeIndex) -> &Array2<f64> {
        &self.stacked_bases[state.flatten(self.noise.num_states())]
    }
}

/// Fits the activation of one composite state to a noisy frame.
pub fn estimate_activation(
    y: &ArrayView1<f64>,
    state: CompositeIndex,
    model: &CompositeModel,
    cfg: &EnhanceConfig,
) -> Result<Array1<f64>, EnhanceError> {
    fit_activation(y, model.stacked(state), cfg.mu_iterations)
}

/// All-ones start, then `iterations` activation updates.
fn fit_activation(y: &ArrayView1<f64>, w: &Array2<f64>, iterations: usize) -> Result<Array1<f64>, EnhanceError> {
    if y.len() != w.nrows() {
        return Err(EnhanceError::ModelDimensionMismatch(format!(
            "frame has {} bins, basis {}",
            y.len(),
            w.nrows()
        )));
    }
    let v = y.mapv(|x| x.max(0.0)).insert_axis(Axis(1));
    let mut h = Array2::ones((w.ncols(), 1));
    for _ in 0..iterations {
        h = kl_nmf::mu_update_h(&v.view(), &w.view(), &h.view())?;
    }
    Ok(h.remove_axis(Axis(1)))
}

/// Speech and noise rates of a stacked activation.
fn split_rates(h: &ArrayView1<f64>, w: &Array2<f64>, speech_atoms: usize) -> (Array1<f64>, Array1<f64>) {
    let speech = w.slice(s![.., ..speech_atoms]).dot(&h.slice(s![..speech_atoms]));
    let noise = w.slice(s![.., speech_atoms..]).dot(&h.slice(s![speech_atoms..]));
    (speech, noise)
}

fn wiener_share(speech: &Array1<f64>, noise: &Array1<f64>) -> Array1<f64> {
    ndarray::Zip::from(speech)
        .and(noise)
        .map_collect(|&s, &m| {
            let (s, m) = (s.max(0.0), m.max(0.0));
            if s + m > 0.0 {
                s / (s + m)
            } else {
                0.5
            }
        })
}

/// Speech share `p` of each bin under one composite state. The noise share
/// is `1 − p`.
pub fn state_gain(h: &ArrayView1<f64>, state: CompositeIndex, model: &CompositeModel) -> Array1<f64> {
    let (speech, noise) = split_rates(h, model.stacked(state), model.speech_atoms());
    wiener_share(&speech, &noise)
}

/// Wiener-like gain of plain NMF with a single speech basis and a single
/// noise basis, using the same activation fit as the composite model.
pub fn nmf_gain(
    y: &ArrayView1<f64>,
    speech_basis: &Array2<f64>,
    noise_basis: &Array2<f64>,
    iterations: usize,
) -> Result<Array1<f64>, EnhanceError> {
    let w = concatenate![Axis(1), *speech_basis, *noise_basis];
    let h = fit_activation(y, &w, iterations)?;
    let (speech, noise) = split_rates(&h.view(), &w, speech_basis.ncols());
    Ok(wiener_share(&speech, &noise))
}

/// Everything computed for one composite state at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEvaluation {
    pub activation: Array1<f64>,
    /// speech share per bin
    pub gain: Array1<f64>,
    pub loglik: f64,
}

fn evaluate_state(
    y: &ArrayView1<f64>,
    flat: usize,
    model: &CompositeModel,
    cfg: &EnhanceConfig,
) -> Result<StateEvaluation, EnhanceError> {
    let w = &model.stacked_bases[flat];
    let activation = fit_activation(y, w, cfg.mu_iterations)?;
    let (speech, noise) = split_rates(&activation.view(), w, model.speech_atoms());
    let floor = cfg.epsilon.max(EPSILON);
    let rate = (&speech + &noise).mapv(|x| x.max(floor));
    let loglik = hmm_core::poisson_state_loglik(y, &rate.view())?;
    let gain = wiener_share(&speech, &noise);
    Ok(StateEvaluation {
        activation,
        gain,
        loglik,
    })
}

/// Evaluates every composite state on one frame, in flattened order.
pub fn evaluate_states(
    y: &ArrayView1<f64>,
    model: &CompositeModel,
    cfg: &EnhanceConfig,
) -> Result<Vec<StateEvaluation>, EnhanceError> {
    let eval = |c: usize| evaluate_state(y, c, model, cfg);
    if cfg.parallel {
        (0..model.num_states()).into_par_iter().map(eval).collect()
    } else {
        (0..model.num_states()).map(eval).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    /// clean magnitude estimate `y ⊙ g`
    pub enhanced: Array1<f64>,
    pub gain: Array1<f64>,
    /// filtering weights `ω`, carried to the next frame
    pub state: ForwardState,
}

/// Weights, gain and estimate from per-state evaluations. Sums run in
/// composite-state order regardless of how the evaluations were produced.
pub fn combine_states(
    y: &ArrayView1<f64>,
    evaluations: &[StateEvaluation],
    prev: Option<&ForwardState>,
    model: &CompositeModel,
    cfg: &EnhanceConfig,
) -> Result<FrameOutput, EnhanceError> {
    if evaluations.len() != model.num_states() {
        return Err(EnhanceError::ModelDimensionMismatch(format!(
            "{} evaluations for {} composite states",
            evaluations.len(),
            model.num_states()
        )));
    }
    let pred = hmm_core::forward_predict(prev, &model.chain);
    let logliks = Array1::from_iter(evaluations.iter().map(|e| e.loglik));
    let frame_index = prev.map_or(0, |p| p.frame_index) + 1;
    let state = hmm_core::forward_update(&pred.view(), &logliks.view(), frame_index)?;

    let mut gain = Array1::<f64>::zeros(y.len());
    for (omega, e) in state.probs.iter().zip(evaluations) {
        if *omega != 0.0 {
            gain.scaled_add(*omega, &e.gain);
        }
    }
    gain.mapv_inplace(|g| g.clamp(cfg.min_gain, 1.0));
    let enhanced = ndarray::Zip::from(y).and(&gain).map_collect(|&x, &g| x * g);
    Ok(FrameOutput { enhanced, gain, state })
}

/// One step of the online estimator.
pub fn enhance_frame(
    y: &ArrayView1<f64>,
    prev: Option<&ForwardState>,
    model: &CompositeModel,
    cfg: &EnhanceConfig,
) -> Result<FrameOutput, EnhanceError> {
    let evaluations = evaluate_states(y, model, cfg)?;
    combine_states(y, &evaluations, prev, model, cfg)
}

/// Gains (bins × frames) for a magnitude spectrogram, filtering from the
/// composite initial distribution.
pub fn enhance_magnitudes(
    magnitudes: &Array2<f64>,
    model: &CompositeModel,
    cfg: &EnhanceConfig,
) -> Result<Array2<f64>, EnhanceError> {
    cfg.validate()?;
    if magnitudes.nrows() != model.bins() {
        return Err(EnhanceError::ModelDimensionMismatch(format!(
            "spectrogram has {} bins, models have {}",
            magnitudes.nrows(),
            model.bins()
        )));
    }
    let mut gains = Array2::zeros(magnitudes.dim());
    let mut state: Option<ForwardState> = None;
    for (n, y) in magnitudes.axis_iter(Axis(1)).enumerate() {
        let out = enhance_frame(&y, state.as_ref(), model, cfg)?;
        gains.column_mut(n).assign(&out.gain);
        state = Some(out.state);
    }
    Ok(gains)
}

#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    pub clip: AudioClip,
    /// bins × frames
    pub gains: Array2<f64>,
}

/// Enhances a noisy clip. The gains scale the complex STFT, so the noisy
/// phase is kept.
pub fn enhance(
    noisy: &AudioClip,
    model: &CompositeModel,
    stft_cfg: &StftConfig,
    cfg: &EnhanceConfig,
) -> Result<EnhanceOutput, EnhanceError> {
    if stft_cfg.bins() != model.bins() {
        return Err(EnhanceError::ModelDimensionMismatch(format!(
            "STFT of length {} gives {} bins, models have {}",
            stft_cfg.frame_len,
            stft_cfg.bins(),
            model.bins()
        )));
    }
    let spec = spectral::stft(noisy, stft_cfg)?;
    let gains = enhance_magnitudes(&spec.magnitudes, model, cfg)?;
    let clip = spectral::istft(&spec.apply_gain(&gains)?)?;
    Ok(EnhanceOutput { clip, gains })
}
