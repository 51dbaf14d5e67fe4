//! Offline EM training of a Poisson-emission HMM whose states each own an
//! NMF basis.
//!
//! Each iteration computes per-state frame likelihoods from the current
//! bases and activations, runs forward-backward per utterance, then
//! re-estimates the chain, the bases (posterior-weighted update) and the
//! activations (classic update), and finally renormalizes basis columns.
//! Utterances are independent chains that all start from the initial
//! distribution; their sufficient statistics are summed in input order.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm_core::{self, ChainParams, ChainStats, HmmError, PosteriorSet};
use crate::kl_nmf::{self, NmfError, WeightedBasisTerms, EPSILON};
use crate::spectral::StftConfig;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Chain(#[from] HmmError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRole {
    Speech,
    Noise,
}

impl SourceRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceRole::Speech => "speech",
            SourceRole::Noise => "noise",
        }
    }
}

impl std::fmt::Display for SourceRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SourceRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "speech" => Ok(SourceRole::Speech),
            "noise" => Ok(SourceRole::Noise),
            other => Err(format!("unknown role {other:?}, expected speech or noise")),
        }
    }
}

/// How a model was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub role: SourceRole,
    pub seed: u64,
    pub iterations: usize,
    pub stft: StftConfig,
    /// Creation time as given by the caller; `None` keeps saved files
    /// reproducible byte for byte.
    pub created: Option<String>,
}

/// A trained chain plus one L1-normalized basis (bins × atoms) per state.
/// Activations are per utterance and are not part of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmNmfModel {
    pub chain: ChainParams,
    pub bases: Vec<Array2<f64>>,
    pub meta: ModelMeta,
}

impl HmmNmfModel {
    pub fn num_states(&self) -> usize {
        self.chain.num_states()
    }

    pub fn basis_count(&self) -> usize {
        self.bases.first().map_or(0, |w| w.ncols())
    }

    pub fn bins(&self) -> usize {
        self.bases.first().map_or(0, |w| w.nrows())
    }

    /// Checks chain stochasticity, basis shapes, the floor, and column
    /// normalization, all against `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), String> {
        self.chain.validate(tol).map_err(|e| e.to_string())?;
        if self.bases.len() != self.num_states() {
            return Err(format!(
                "{} bases for {} states",
                self.bases.len(),
                self.num_states()
            ));
        }
        let (f, k) = (self.bins(), self.basis_count());
        if f == 0 || k == 0 {
            return Err("empty basis".into());
        }
        for (j, w) in self.bases.iter().enumerate() {
            if w.dim() != (f, k) {
                return Err(format!("basis {j} is {:?}, expected {:?}", w.dim(), (f, k)));
            }
            if let Some(x) = w.iter().find(|x| !x.is_finite() || **x < EPSILON * (1.0 - tol)) {
                return Err(format!("basis {j} has entry {x} below the floor"));
            }
            for (col, c) in w.columns().into_iter().enumerate() {
                let s = c.sum();
                if (s - 1.0).abs() > tol {
                    return Err(format!("basis {j} column {col} sums to {s}"));
                }
            }
        }
        Ok(())
    }

    /// Relabels states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            chain: self.chain.permuted(perm),
            bases: perm.iter().map(|&p| self.bases[p].clone()).collect(),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub states: usize,
    pub basis: usize,
    pub iterations: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Stop early once the relative log-likelihood gain drops below this.
    pub tolerance: Option<f64>,
    pub parallel: bool,
    pub role: SourceRole,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            states: 40,
            basis: 25,
            iterations: 30,
            seed: 0,
            epsilon: EPSILON,
            tolerance: None,
            parallel: false,
            role: SourceRole::Speech,
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.states == 0 || self.basis == 0 || self.iterations == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "states ({}), basis ({}) and iterations ({}) must all be at least 1",
                self.states, self.basis, self.iterations
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "floor {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Activations for one utterance, one matrix (atoms × frames) per state.
pub type UtteranceActivations = Vec<Array2<f64>>;

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: HmmNmfModel,
    /// Total log-likelihood seen at the E-step of each iteration.
    pub trace: Vec<f64>,
    /// Posteriors from the last E-step, one per utterance.
    pub posteriors: Vec<PosteriorSet>,
    pub activations: Vec<UtteranceActivations>,
}

/// Random starting point: bases first (state by state), then activations
/// (utterance by utterance, state by state), all from one seeded stream.
/// Basis columns are normalized with the activations rescaled to match.
pub fn init_model(
    bins: usize,
    frames: &[usize],
    cfg: &TrainConfig,
) -> Result<(HmmNmfModel, Vec<UtteranceActivations>), TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bases = Vec::with_capacity(cfg.states);
    let mut scales = Vec::with_capacity(cfg.states);
    for _ in 0..cfg.states {
        let mut w = kl_nmf::random_matrix(bins, cfg.basis, cfg.epsilon, &mut rng);
        scales.push(kl_nmf::normalize_basis(&mut w));
        bases.push(w);
    }
    let activations = frames
        .iter()
        .map(|&n| {
            scales
                .iter()
                .map(|s| {
                    let mut h = kl_nmf::random_matrix(cfg.basis, n, cfg.epsilon, &mut rng);
                    kl_nmf::scale_activations(&mut h, s);
                    h.mapv_inplace(|x| x.max(cfg.epsilon));
                    h
                })
                .collect()
        })
        .collect();
    let model = HmmNmfModel {
        chain: ChainParams::uniform(cfg.states),
        bases,
        meta: ModelMeta {
            role: cfg.role,
            seed: cfg.seed,
            iterations: 0,
            stft: cfg.stft,
            created: None,
        },
    };
    Ok((model, activations))
}

/// Trains from a seeded random initialization.
pub fn train(spectrograms: &[Array2<f64>], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let bins = check_inputs(spectrograms, cfg)?;
    let frames: Vec<usize> = spectrograms.iter().map(|s| s.ncols()).collect();
    let (model, activations) = init_model(bins, &frames, cfg)?;
    train_from(spectrograms, model, activations, cfg)
}

fn check_inputs(spectrograms: &[Array2<f64>], cfg: &TrainConfig) -> Result<usize, TrainError> {
    let first = spectrograms
        .first()
        .ok_or_else(|| TrainError::DimensionMismatch("no training spectrograms".into()))?;
    let bins = first.nrows();
    if bins == 0 {
        return Err(TrainError::DimensionMismatch("spectrogram has no bins".into()));
    }
    for (i, s) in spectrograms.iter().enumerate() {
        if s.nrows() != bins {
            return Err(TrainError::DimensionMismatch(format!(
                "spectrogram {i} has {} bins, expected {bins}",
                s.nrows()
            )));
        }
        if s.ncols() == 0 {
            return Err(TrainError::DimensionMismatch(format!("spectrogram {i} has no frames")));
        }
        if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(TrainError::DimensionMismatch(format!(
                "spectrogram {i} has negative or non-finite entries"
            )));
        }
    }
    let total: usize = spectrograms.iter().map(|s| s.ncols()).sum();
    if total < cfg.states {
        return Err(TrainError::DimensionMismatch(format!(
            "{total} frames cannot support {} states",
            cfg.states
        )));
    }
    Ok(bins)
}

/// Runs EM from a given starting point.
pub fn train_from(
    spectrograms: &[Array2<f64>],
    mut model: HmmNmfModel,
    mut activations: Vec<UtteranceActivations>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let bins = check_inputs(spectrograms, cfg)?;
    if model.num_states() != cfg.states || model.bases.len() != cfg.states {
        return Err(TrainError::DimensionMismatch(format!(
            "initial model has {} states, configuration asks for {}",
            model.num_states(),
            cfg.states
        )));
    }
    if model.bins() != bins || model.basis_count() != cfg.basis {
        return Err(TrainError::DimensionMismatch(format!(
            "initial bases are {}×{}, expected {bins}×{}",
            model.bins(),
            model.basis_count(),
            cfg.basis
        )));
    }
    if activations.len() != spectrograms.len()
        || activations.iter().zip(spectrograms).any(|(acts, s)| {
            acts.len() != cfg.states || acts.iter().any(|h| h.dim() != (cfg.basis, s.ncols()))
        })
    {
        return Err(TrainError::DimensionMismatch(
            "initial activations do not match the spectrograms".into(),
        ));
    }

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut posteriors = Vec::new();
    for _ in 0..cfg.iterations {
        // E-step
        let estep = |(v, acts): (&Array2<f64>, &UtteranceActivations)| -> Result<PosteriorSet, TrainError> {
            let ll = state_logliks(&v.view(), &model.bases, acts, cfg.epsilon)?;
            Ok(hmm_core::forward_backward(&ll.view(), &model.chain)?)
        };
        posteriors = if cfg.parallel {
            spectrograms
                .par_iter()
                .zip(activations.par_iter())
                .map(estep)
                .collect::<Result<Vec<_>, _>>()?
        } else {
            spectrograms
                .iter()
                .zip(activations.iter())
                .map(estep)
                .collect::<Result<Vec<_>, _>>()?
        };
        let total: f64 = posteriors.iter().map(|p| p.log_likelihood).sum();
        let previous = trace.last().copied();
        trace.push(total);

        // M-step
        let mut stats = ChainStats::new(cfg.states);
        for p in &posteriors {
            stats.accumulate(p)?;
        }
        model.chain = stats.finish()?;

        let update_state = |j: usize| -> Result<(Array2<f64>, Vec<Array2<f64>>), TrainError> {
            update_state(spectrograms, &model.bases[j], &activations, &posteriors, j, cfg.epsilon)
        };
        let updated: Vec<_> = if cfg.parallel {
            (0..cfg.states)
                .into_par_iter()
                .map(update_state)
                .collect::<Result<_, _>>()?
        } else {
            (0..cfg.states).map(update_state).collect::<Result<_, _>>()?
        };
        for (j, (w, hs)) in updated.into_iter().enumerate() {
            model.bases[j] = w;
            for (acts, h) in activations.iter_mut().zip(hs) {
                acts[j] = h;
            }
        }
        model.meta.iterations += 1;

        if let (Some(tol), Some(prev)) = (cfg.tolerance, previous) {
            if ((total - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < tol {
                break;
            }
        }
    }

    Ok(TrainOutput {
        model,
        trace,
        posteriors,
        activations,
    })
}

/// Posterior-weighted basis update over all utterances, then the classic
/// activation update with the new basis, then column normalization.
fn update_state(
    spectrograms: &[Array2<f64>],
    w: &Array2<f64>,
    activations: &[UtteranceActivations],
    posteriors: &[PosteriorSet],
    state: usize,
    floor: f64,
) -> Result<(Array2<f64>, Vec<Array2<f64>>), TrainError> {
    let mut terms = WeightedBasisTerms::zeros(w.nrows(), w.ncols());
    for ((v, acts), post) in spectrograms.iter().zip(activations).zip(posteriors) {
        let weights = post.gamma.row(state).mapv(|q| q.clamp(0.0, 1.0));
        let t = kl_nmf::weighted_basis_terms(&v.view(), &w.view(), &acts[state].view(), &weights.view())?;
        terms.accumulate(&t);
    }
    let mut w_new = kl_nmf::apply_w_update(&w.view(), &terms.numer, &terms.denom);
    floor_in_place(&mut w_new, floor);

    let mut hs = Vec::with_capacity(spectrograms.len());
    for (v, acts) in spectrograms.iter().zip(activations) {
        let mut h = kl_nmf::mu_update_h_weighted(&v.view(), &w_new.view(), &acts[state].view())?;
        floor_in_place(&mut h, floor);
        hs.push(h);
    }
    let scales = kl_nmf::normalize_basis(&mut w_new);
    for h in hs.iter_mut() {
        kl_nmf::scale_activations(h, &scales);
    }
    w_new.mapv_inplace(|x| x.max(floor.max(EPSILON)));
    Ok((w_new, hs))
}

fn floor_in_place(m: &mut Array2<f64>, floor: f64) {
    if floor != EPSILON {
        m.mapv_inplace(|x| x.max(floor));
    }
}

/// states × frames log-likelihoods of one utterance under the current
/// per-state factorizations.
pub fn state_logliks(
    v: &ArrayView2<f64>,
    bases: &[Array2<f64>],
    activations: &[Array2<f64>],
    floor: f64,
) -> Result<Array2<f64>, TrainError> {
    let mut ll = Array2::zeros((bases.len(), v.ncols()));
    for (j, (w, h)) in bases.iter().zip(activations).enumerate() {
        let rate = w.dot(h).mapv(|x| x.max(floor.max(EPSILON)));
        for n in 0..v.ncols() {
            ll[[j, n]] = hmm_core::poisson_state_loglik(&v.column(n), &rate.column(n))?;
        }
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cfg(states: usize, basis: usize, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            states,
            basis,
            iterations,
            seed,
            ..TrainConfig::default()
        }
    }

    fn random_spectrograms(seed: u64, bins: usize, lens: &[usize]) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lens.iter()
            .map(|&n| Array2::from_shape_simple_fn((bins, n), || rng.gen_range(0.0..5.0)))
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_floored() {
        let c = cfg(3, 4, 1, 99);
        let (a, ha) = init_model(10, &[5, 7], &c).unwrap();
        let (b, hb) = init_model(10, &[5, 7], &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        a.validate(1e-9).unwrap();
        assert!(ha.iter().flatten().flat_map(|h| h.iter()).all(|&x| x >= EPSILON));
        assert_eq!(a.chain, ChainParams::uniform(3));

        let (other, _) = init_model(10, &[5, 7], &cfg(3, 4, 1, 100)).unwrap();
        assert_ne!(a.bases, other.bases);
    }

    #[test]
    fn rejects_bad_inputs() {
        let specs = random_spectrograms(1, 6, &[4, 3]);
        assert!(matches!(train(&specs, &cfg(0, 2, 1, 0)), Err(TrainError::InvalidConfig(_))));
        assert!(matches!(train(&specs, &cfg(8, 2, 1, 0)), Err(TrainError::DimensionMismatch(_))));
        let mixed = vec![specs[0].clone(), Array2::ones((5, 3))];
        assert!(matches!(train(&mixed, &cfg(2, 2, 1, 0)), Err(TrainError::DimensionMismatch(_))));
        assert!(matches!(train(&[], &cfg(1, 2, 1, 0)), Err(TrainError::DimensionMismatch(_))));
    }

    #[test]
    fn trace_is_non_decreasing() {
        let specs = random_spectrograms(2, 12, &[30, 25, 18]);
        let out = train(&specs, &cfg(3, 4, 5, 7)).unwrap();
        assert_eq!(out.trace.len(), 5);
        for w in out.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{:?}", out.trace);
        }
        out.model.validate(1e-9).unwrap();
    }

    #[test]
    fn single_state_is_classic_nmf() {
        let specs = random_spectrograms(3, 9, &[40]);
        let c = cfg(1, 3, 12, 5);
        let (init, acts) = init_model(9, &[40], &c).unwrap();
        let classic = kl_nmf::fit(
            &specs[0].view(),
            kl_nmf::NmfFactors::new(init.bases[0].clone(), acts[0][0].clone()).unwrap(),
            12,
        )
        .unwrap();
        let out = train_from(&specs, init, acts, &c).unwrap();
        for (a, b) in out.model.bases[0].iter().zip(&classic.w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert_eq!(out.model.chain, ChainParams::uniform(1));
    }

    #[test]
    fn parallel_matches_sequential() {
        let specs = random_spectrograms(4, 8, &[20, 15]);
        let mut c = cfg(3, 2, 4, 11);
        let seq = train(&specs, &c).unwrap();
        c.parallel = true;
        let par = train(&specs, &c).unwrap();
        assert_eq!(seq.model, par.model);
        assert_eq!(seq.trace, par.trace);
    }

    #[test]
    fn tolerance_can_stop_early() {
        let specs = random_spectrograms(5, 8, &[20]);
        let mut c = cfg(1, 2, 200, 1);
        c.tolerance = Some(1e-3);
        let out = train(&specs, &c).unwrap();
        assert!(out.trace.len() < 200);
        assert_eq!(out.model.meta.iterations, out.trace.len());
    }

    #[test]
    fn relabelled_initialization_permutes_result() {
        let specs = random_spectrograms(6, 10, &[25, 20]);
        let c = cfg(2, 3, 6, 21);
        let lens = [25, 20];
        let (init, acts) = init_model(10, &lens, &c).unwrap();
        let mut init = init;
        init.chain = ChainParams::new(
            ndarray::array![0.3, 0.7],
            ndarray::array![[0.6, 0.4], [0.25, 0.75]],
        )
        .unwrap();
        let perm = [1usize, 0];
        let p_init = init.permuted(&perm);
        let p_acts: Vec<UtteranceActivations> = acts
            .iter()
            .map(|a| perm.iter().map(|&p| a[p].clone()).collect())
            .collect();
        let base = train_from(&specs, init, acts, &c).unwrap();
        let relabelled = train_from(&specs, p_init, p_acts, &c).unwrap();
        assert_eq!(relabelled.model, base.model.permuted(&perm));
        assert_eq!(relabelled.trace, base.trace);
    }
}
