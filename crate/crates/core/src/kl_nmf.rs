//! KL-divergence NMF: the generalized KL cost, the classic multiplicative
//! updates, and the posterior-weighted basis update used when each HMM
//! state owns its own factorization.
//!
//! All entries are floored at [`EPSILON`] after every update, and every
//! denominator is floored before division.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

/// Floor for factor entries and denominators.
pub const EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NmfError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("estimate entry {value} at ({row}, {col}) is not positive")]
    NonPositiveEstimate { row: usize, col: usize, value: f64 },
    #[error("weight {value} at frame {index} is outside [0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
}

/// A basis `w` (bins × atoms) and its activations `h` (atoms × frames).
#[derive(Debug, Clone, PartialEq)]
pub struct NmfFactors {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
}

impl NmfFactors {
    pub fn new(w: Array2<f64>, h: Array2<f64>) -> Result<Self, NmfError> {
        if w.ncols() != h.nrows() {
            return Err(NmfError::ShapeMismatch(format!(
                "W is {:?} but H is {:?}",
                w.dim(),
                h.dim()
            )));
        }
        Ok(Self { w, h })
    }

    /// Entries uniform on `(0, 1]`, floored at `floor`.
    pub fn random<R: Rng>(bins: usize, atoms: usize, frames: usize, floor: f64, rng: &mut R) -> Self {
        let w = random_matrix(bins, atoms, floor, rng);
        let h = random_matrix(atoms, frames, floor, rng);
        Self { w, h }
    }

    pub fn product(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }
}

pub(crate) fn random_matrix<R: Rng>(rows: usize, cols: usize, floor: f64, rng: &mut R) -> Array2<f64> {
    // gen::<f64>() is on [0, 1); flip it onto (0, 1]
    Array2::from_shape_simple_fn((rows, cols), || (1.0 - rng.gen::<f64>()).max(floor))
}

/// Generalized KL divergence `Σ b log(b/b̂) − b + b̂`, with `0 log 0 = 0`.
pub fn kl_divergence(b: &ArrayView2<f64>, b_hat: &ArrayView2<f64>) -> Result<f64, NmfError> {
    if b.dim() != b_hat.dim() {
        return Err(NmfError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            b.dim(),
            b_hat.dim()
        )));
    }
    let mut total = 0.0;
    for ((idx, &x), &x_hat) in b.indexed_iter().zip(b_hat.iter()) {
        if !(x_hat > 0.0) {
            return Err(NmfError::NonPositiveEstimate {
                row: idx.0,
                col: idx.1,
                value: x_hat,
            });
        }
        let term = if x > 0.0 { x * (x / x_hat).ln() } else { 0.0 };
        total += term - x + x_hat;
    }
    Ok(total.max(0.0))
}

fn check_product_shapes(v: &ArrayView2<f64>, w: &ArrayView2<f64>, h: &ArrayView2<f64>) -> Result<(), NmfError> {
    if w.nrows() != v.nrows() || h.ncols() != v.ncols() || w.ncols() != h.nrows() {
        return Err(NmfError::ShapeMismatch(format!(
            "V {:?}, W {:?}, H {:?}",
            v.dim(),
            w.dim(),
            h.dim()
        )));
    }
    Ok(())
}

/// `V / max(WH, ε)`.
fn ratio(v: &ArrayView2<f64>, w: &ArrayView2<f64>, h: &ArrayView2<f64>) -> Array2<f64> {
    let mut r = w.dot(h);
    r.zip_mut_with(v, |wh, &x| *wh = x / wh.max(EPSILON));
    r
}

/// Classic activation update: `H ⊙ Wᵀ(V / WH) / Wᵀ1`.
pub fn mu_update_h(v: &ArrayView2<f64>, w: &ArrayView2<f64>, h: &ArrayView2<f64>) -> Result<Array2<f64>, NmfError> {
    check_product_shapes(v, w, h)?;
    let r = ratio(v, w, h);
    let numer = w.t().dot(&r);
    let col_sums = w.sum_axis(Axis(0));
    let mut out = h.to_owned();
    for ((k, n), x) in out.indexed_iter_mut() {
        *x = (*x * numer[[k, n]] / col_sums[k].max(EPSILON)).max(EPSILON);
    }
    Ok(out)
}

/// Activation update inside one HMM state. The state posterior does not
/// enter: each frame's activation maximizes its own term of the expected
/// log-likelihood, and a positive frame weight does not move that maximizer.
pub fn mu_update_h_weighted(
    v: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    h: &ArrayView2<f64>,
) -> Result<Array2<f64>, NmfError> {
    mu_update_h(v, w, h)
}

/// Classic basis update: `W ⊙ (V / WH)Hᵀ / 1Hᵀ`.
pub fn mu_update_w(v: &ArrayView2<f64>, w: &ArrayView2<f64>, h: &ArrayView2<f64>) -> Result<Array2<f64>, NmfError> {
    check_product_shapes(v, w, h)?;
    let r = ratio(v, w, h);
    let numer = r.dot(&h.t());
    let denom = h.sum_axis(Axis(1));
    Ok(apply_w_update(w, &numer, &denom))
}

/// Numerator `(V / WH) Λ Hᵀ` and denominator `1 Λ Hᵀ` of the
/// posterior-weighted basis update, kept separate so that several
/// utterances can be accumulated before the update is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBasisTerms {
    /// bins × atoms
    pub numer: Array2<f64>,
    /// one entry per atom (the same for every bin)
    pub denom: Array1<f64>,
}

impl WeightedBasisTerms {
    pub fn zeros(bins: usize, atoms: usize) -> Self {
        Self {
            numer: Array2::zeros((bins, atoms)),
            denom: Array1::zeros(atoms),
        }
    }

    pub fn accumulate(&mut self, other: &WeightedBasisTerms) {
        self.numer += &other.numer;
        self.denom += &other.denom;
    }
}

pub fn weighted_basis_terms(
    v: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    h: &ArrayView2<f64>,
    weights: &ArrayView1<f64>,
) -> Result<WeightedBasisTerms, NmfError> {
    check_product_shapes(v, w, h)?;
    if weights.len() != v.ncols() {
        return Err(NmfError::ShapeMismatch(format!(
            "{} weights for {} frames",
            weights.len(),
            v.ncols()
        )));
    }
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, &q)| !(0.0..=1.0).contains(&q))
    {
        return Err(NmfError::WeightOutOfRange { index, value });
    }
    let mut r = ratio(v, w, h);
    for (mut col, &q) in r.axis_iter_mut(Axis(1)).zip(weights.iter()) {
        col *= q;
    }
    let numer = r.dot(&h.t());
    let mut weighted_h = h.to_owned();
    for (mut col, &q) in weighted_h.axis_iter_mut(Axis(1)).zip(weights.iter()) {
        col *= q;
    }
    let denom = weighted_h.sum_axis(Axis(1));
    Ok(WeightedBasisTerms { numer, denom })
}

/// `W ⊙ numer / denom`, floored.
pub fn apply_w_update(w: &ArrayView2<f64>, numer: &Array2<f64>, denom: &Array1<f64>) -> Array2<f64> {
    let mut out = w.to_owned();
    for ((f, k), x) in out.indexed_iter_mut() {
        *x = (*x * numer[[f, k]] / denom[k].max(EPSILON)).max(EPSILON);
    }
    out
}

/// Posterior-weighted basis update for one state: frame `n` counts with
/// weight `q(x_n = j)` in both numerator and denominator. With all weights
/// equal to one this is exactly [`mu_update_w`].
pub fn mu_update_w_weighted(
    v: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    h: &ArrayView2<f64>,
    weights: &ArrayView1<f64>,
) -> Result<Array2<f64>, NmfError> {
    let terms = weighted_basis_terms(v, w, h, weights)?;
    Ok(apply_w_update(w, &terms.numer, &terms.denom))
}

/// Scales each basis column to unit L1 norm and the matching activation
/// row by the inverse, leaving `WH` unchanged.
pub fn normalize_columns(factors: NmfFactors) -> NmfFactors {
    let NmfFactors { mut w, mut h } = factors;
    let scales = normalize_basis(&mut w);
    scale_activations(&mut h, &scales);
    NmfFactors { w, h }
}

/// Normalizes `w` in place and returns the column sums it divided by.
pub(crate) fn normalize_basis(w: &mut Array2<f64>) -> Array1<f64> {
    let sums = w.sum_axis(Axis(0)).mapv(|s| s.max(EPSILON));
    for (mut col, &s) in w.axis_iter_mut(Axis(1)).zip(sums.iter()) {
        col /= s;
    }
    sums
}

pub(crate) fn scale_activations(h: &mut Array2<f64>, scales: &Array1<f64>) {
    for (mut row, &s) in h.axis_iter_mut(Axis(0)).zip(scales.iter()) {
        row *= s;
    }
}

/// Plain KL-NMF: `iterations` rounds of basis update, activation update and
/// column normalization. Normalization can push floored entries below the
/// floor, so the basis is floored once more afterwards.
pub fn fit(v: &ArrayView2<f64>, init: NmfFactors, iterations: usize) -> Result<NmfFactors, NmfError> {
    let mut f = init;
    for _ in 0..iterations {
        let w = mu_update_w(v, &f.w.view(), &f.h.view())?;
        let h = mu_update_h(v, &w.view(), &f.h.view())?;
        f = normalize_columns(NmfFactors { w, h });
        f.w.mapv_inplace(|x| x.max(EPSILON));
    }
    Ok(f)
}
