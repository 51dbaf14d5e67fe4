//! Finite-state chain machinery shared by training and enhancement:
//! Poisson frame likelihoods, scaled forward-backward, one-step forward
//! filtering, the transition/initial M-step, and Kronecker composition of a
//! speech chain with a noise chain.
//!
//! Log-likelihoods drop the `−log Γ(y+1)` term. It is the same for every
//! state within a frame, so posteriors and filtering weights are unaffected;
//! absolute log-likelihood values are defined only up to it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::kl_nmf::EPSILON;

/// Row-sum and probability-sum tolerance for chain parameters.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum HmmError {
    #[error("rate {value} at bin {bin} is below the floor")]
    NonPositiveRate { bin: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward mass vanished at frame {frame}")]
    DegenerateChain { frame: usize },
    #[error("predictive distribution has no mass on any state with finite likelihood")]
    AllZeroPosterior,
    #[error("no sufficient statistics to re-estimate the chain")]
    EmptyStatistics,
    #[error("invalid chain: {0}")]
    InvalidChain(String),
}

/// Initial distribution and row-stochastic transition matrix
/// (`transitions[[i, j]] = P(next = j | current = i)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub initial: Array1<f64>,
    pub transitions: Array2<f64>,
}

impl ChainParams {
    pub fn new(initial: Array1<f64>, transitions: Array2<f64>) -> Result<Self, HmmError> {
        let chain = Self {
            initial,
            transitions,
        };
        chain.validate(STOCHASTIC_TOL)?;
        Ok(chain)
    }

    pub fn uniform(states: usize) -> Self {
        let p = 1.0 / states as f64;
        Self {
            initial: Array1::from_elem(states, p),
            transitions: Array2::from_elem((states, states), p),
        }
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self, tol: f64) -> Result<(), HmmError> {
        let j = self.initial.len();
        if j == 0 {
            return Err(HmmError::InvalidChain("no states".into()));
        }
        if self.transitions.dim() != (j, j) {
            return Err(HmmError::InvalidChain(format!(
                "{j} initial probabilities but transition matrix is {:?}",
                self.transitions.dim()
            )));
        }
        let bad = |x: &f64| !x.is_finite() || *x < 0.0;
        if self.initial.iter().any(bad) || self.transitions.iter().any(bad) {
            return Err(HmmError::InvalidChain("negative or non-finite probability".into()));
        }
        let s = self.initial.sum();
        if (s - 1.0).abs() > tol {
            return Err(HmmError::InvalidChain(format!("initial probabilities sum to {s}")));
        }
        for (i, row) in self.transitions.rows().into_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > tol {
                return Err(HmmError::InvalidChain(format!("transition row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Relabels states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let j = self.num_states();
        Self {
            initial: Array1::from_shape_fn(j, |i| self.initial[perm[i]]),
            transitions: Array2::from_shape_fn((j, j), |(a, b)| self.transitions[[perm[a], perm[b]]]),
        }
    }
}

/// Smoothed state posteriors of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    /// states × frames, `gamma[[j, n]] = q(x_n = j)`
    pub gamma: Array2<f64>,
    /// one states × states slice per frame pair:
    /// `xi[n - 1][[i, j]] = q(x_{n-1} = i, x_n = j)`
    pub xi: Vec<Array2<f64>>,
    pub log_likelihood: f64,
}

/// Filtering distribution after `frame_index` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    pub probs: Array1<f64>,
    pub frame_index: usize,
}

/// `Σ_f y_f log λ_f − λ_f`.
pub fn poisson_state_loglik(y: &ArrayView1<f64>, rate: &ArrayView1<f64>) -> Result<f64, HmmError> {
    if y.len() != rate.len() {
        return Err(HmmError::ShapeMismatch(format!(
            "{} observations, {} rates",
            y.len(),
            rate.len()
        )));
    }
    let mut total = 0.0;
    for (bin, (&x, &lambda)) in y.iter().zip(rate.iter()).enumerate() {
        if !(lambda >= EPSILON) || !lambda.is_finite() {
            return Err(HmmError::NonPositiveRate { bin, value: lambda });
        }
        if x > 0.0 {
            total += x * lambda.ln();
        }
        total -= lambda;
    }
    Ok(total)
}

/// One filtering step: combines the predictive distribution with frame
/// log-likelihoods. Returns the normalized posterior and
/// `log p(y_n | y_1..n-1)`.
///
/// The scaling constant is the largest `log pred + loglik` over states that
/// the prediction can reach, so at least one scaled term equals one.
fn filter_step(pred: &ArrayView1<f64>, loglik: &ArrayView1<f64>) -> Option<(Array1<f64>, f64)> {
    let mut shift = f64::NEG_INFINITY;
    for (&p, &ll) in pred.iter().zip(loglik.iter()) {
        if p > 0.0 && ll.is_finite() {
            shift = shift.max(p.ln() + ll);
        }
    }
    if !shift.is_finite() {
        return None;
    }
    let mut post = Array1::zeros(pred.len());
    let mut total = 0.0;
    for ((dst, &p), &ll) in post.iter_mut().zip(pred.iter()).zip(loglik.iter()) {
        if p > 0.0 && ll.is_finite() {
            let v = (p.ln() + ll - shift).exp();
            *dst = v;
            total += v;
        }
    }
    post /= total;
    Some((post, shift + total.ln()))
}

/// `Σ_i A[i, j] prev[i]`, or the initial distribution before the first frame.
pub fn forward_predict(prev: Option<&ForwardState>, chain: &ChainParams) -> Array1<f64> {
    let Some(prev) = prev else {
        return chain.initial.clone();
    };
    let j = chain.num_states();
    let mut out = Array1::zeros(j);
    for (i, &p) in prev.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (dst, &a) in out.iter_mut().zip(chain.transitions.row(i).iter()) {
            *dst += p * a;
        }
    }
    let s = out.sum();
    if s > 0.0 {
        out /= s;
    }
    out
}

/// Posterior over states for the current frame given its predictive
/// distribution. `frame_index` counts frames seen including this one.
pub fn forward_update(
    pred: &ArrayView1<f64>,
    frame_loglik: &ArrayView1<f64>,
    frame_index: usize,
) -> Result<ForwardState, HmmError> {
    if pred.len() != frame_loglik.len() {
        return Err(HmmError::ShapeMismatch(format!(
            "{} predicted states, {} likelihoods",
            pred.len(),
            frame_loglik.len()
        )));
    }
    let (probs, _) = filter_step(pred, frame_loglik).ok_or(HmmError::AllZeroPosterior)?;
    Ok(ForwardState { probs, frame_index })
}

/// Scaled forward-backward over a states × frames log-likelihood matrix.
pub fn forward_backward(loglik: &ArrayView2<f64>, chain: &ChainParams) -> Result<PosteriorSet, HmmError> {
    let (j, n_frames) = loglik.dim();
    if j != chain.num_states() {
        return Err(HmmError::ShapeMismatch(format!(
            "{j} likelihood rows for a {}-state chain",
            chain.num_states()
        )));
    }
    if n_frames == 0 {
        return Err(HmmError::EmptyStatistics);
    }

    // forward: alpha[n] = p(x_n | y_1..n)
    let mut alpha = Array2::<f64>::zeros((j, n_frames));
    let mut shifts = vec![0.0; n_frames];
    let mut log_likelihood = 0.0;
    let mut prev: Option<ForwardState> = None;
    for n in 0..n_frames {
        let pred = forward_predict(prev.as_ref(), chain);
        let (post, log_c) =
            filter_step(&pred.view(), &loglik.column(n)).ok_or(HmmError::DegenerateChain { frame: n })?;
        log_likelihood += log_c;
        // emissions in the backward pass are scaled by the best likelihood
        // among states the forward pass can occupy
        shifts[n] = post
            .iter()
            .zip(loglik.column(n).iter())
            .filter(|(&a, _)| a > 0.0)
            .map(|(_, &ll)| ll)
            .fold(f64::NEG_INFINITY, f64::max);
        alpha.column_mut(n).assign(&post);
        prev = Some(ForwardState {
            probs: post,
            frame_index: n + 1,
        });
    }

    // backward, renormalized to max 1 each frame; states with no forward
    // mass are skipped since every path through them has zero weight
    let emission = |m: usize, s: usize| (loglik[[s, m]] - shifts[m]).exp();
    let mut beta = Array2::<f64>::zeros((j, n_frames));
    beta.column_mut(n_frames - 1).fill(1.0);
    for n in (0..n_frames - 1).rev() {
        let mut col = Array1::<f64>::zeros(j);
        for i in 0..j {
            let mut acc = 0.0;
            for s in 0..j {
                if alpha[[s, n + 1]] > 0.0 {
                    acc += chain.transitions[[i, s]] * emission(n + 1, s) * beta[[s, n + 1]];
                }
            }
            col[i] = acc;
        }
        let scale = col.iter().copied().fold(0.0, f64::max);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(HmmError::DegenerateChain { frame: n });
        }
        col /= scale;
        beta.column_mut(n).assign(&col);
    }

    let mut gamma = &alpha * &beta;
    for (n, mut col) in gamma.columns_mut().into_iter().enumerate() {
        let s = col.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(HmmError::DegenerateChain { frame: n });
        }
        col /= s;
    }

    let mut xi = Vec::with_capacity(n_frames.saturating_sub(1));
    for n in 1..n_frames {
        let mut slice = Array2::<f64>::zeros((j, j));
        for i in 0..j {
            let a = alpha[[i, n - 1]];
            if a == 0.0 {
                continue;
            }
            for s in 0..j {
                if alpha[[s, n]] > 0.0 {
                    slice[[i, s]] = a * chain.transitions[[i, s]] * emission(n, s) * beta[[s, n]];
                }
            }
        }
        let total: f64 = slice.rows().into_iter().map(|r| r.sum()).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(HmmError::DegenerateChain { frame: n });
        }
        slice /= total;
        xi.push(slice);
    }

    Ok(PosteriorSet {
        gamma,
        xi,
        log_likelihood,
    })
}

/// Expected counts for re-estimating a chain, accumulated over sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStats {
    pub first_frame: Array1<f64>,
    pub transitions: Array2<f64>,
    pub sequences: usize,
}

impl ChainStats {
    pub fn new(states: usize) -> Self {
        Self {
            first_frame: Array1::zeros(states),
            transitions: Array2::zeros((states, states)),
            sequences: 0,
        }
    }

    pub fn accumulate(&mut self, post: &PosteriorSet) -> Result<(), HmmError> {
        let j = self.first_frame.len();
        if post.gamma.nrows() != j || post.gamma.ncols() == 0 {
            return Err(HmmError::ShapeMismatch(format!(
                "posterior of shape {:?} for {j} states",
                post.gamma.dim()
            )));
        }
        self.first_frame += &post.gamma.column(0);
        for slice in &post.xi {
            self.transitions += slice;
        }
        self.sequences += 1;
        Ok(())
    }

    /// Normalizes the counts into a chain. A state that never emits a
    /// transition gets a uniform row; the expected log-likelihood does not
    /// depend on that row.
    pub fn finish(&self) -> Result<ChainParams, HmmError> {
        if self.sequences == 0 {
            return Err(HmmError::EmptyStatistics);
        }
        let j = self.first_frame.len();
        let initial = &self.first_frame / self.first_frame.sum();
        let mut transitions = self.transitions.clone();
        for mut row in transitions.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            } else {
                row.fill(1.0 / j as f64);
            }
        }
        Ok(ChainParams {
            initial,
            transitions,
        })
    }
}

/// Re-estimates initial and transition probabilities from posteriors of one
/// or more sequences.
pub fn mstep_chain(posteriors: &[PosteriorSet]) -> Result<ChainParams, HmmError> {
    let first = posteriors.first().ok_or(HmmError::EmptyStatistics)?;
    let mut stats = ChainStats::new(first.gamma.nrows());
    for p in posteriors {
        stats.accumulate(p)?;
    }
    stats.finish()
}

/// A (speech state, noise state) pair, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompositeIndex {
    pub speech: usize,
    pub noise: usize,
}

impl CompositeIndex {
    /// Speech-major position: all noise states of speech state 0 first.
    pub fn flatten(self, noise_states: usize) -> usize {
        self.speech * noise_states + self.noise
    }

    pub fn unflatten(index: usize, noise_states: usize) -> Self {
        Self {
            speech: index / noise_states,
            noise: index % noise_states,
        }
    }
}

/// Chain over composite states with `π̄ ⊗ π̈` and `Ā ⊗ Ä`.
pub fn kronecker_compose(speech: &ChainParams, noise: &ChainParams) -> ChainParams {
    let (js, jn) = (speech.num_states(), noise.num_states());
    let j = js * jn;
    let initial = Array1::from_shape_fn(j, |c| {
        let idx = CompositeIndex::unflatten(c, jn);
        speech.initial[idx.speech] * noise.initial[idx.noise]
    });
    let transitions = Array2::from_shape_fn((j, j), |(from, to)| {
        let a = CompositeIndex::unflatten(from, jn);
        let b = CompositeIndex::unflatten(to, jn);
        speech.transitions[[a.speech, b.speech]] * noise.transitions[[a.noise, b.noise]]
    });
    ChainParams {
        initial,
        transitions,
    }
}
