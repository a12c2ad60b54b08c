//! Nyström compression of the MLP block guided by ridge leverage scores.
//!
//! With `C = C_σ` the Gram of post-SiLU activations, channel scores are
//! `diag(C (C + I)⁻¹)`. The `k` highest-scoring channels are kept in the
//! up-projection and the down-projection (in `d_int × d_hid` layout `W₂`)
//! becomes `(Sᵀ C S)⁻¹ Sᵀ C W₂`, the least-squares fit of the full
//! activations from the kept ones.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{FlatError, Result};
use crate::model::DecoderWeights;
use crate::pca::sym_eig_named;

/// Relative pivot floor below which the selected block gets ridge damping.
const PIVOT_FLOOR: f64 = 1e-13;
/// Ridge damping `ε = DAMPING · trace(C_σ) / d_int`.
pub const DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LeverageScores {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    /// Sorted, distinct kept channels.
    pub indices: Vec<usize>,
    pub dim: usize,
}

impl SelectionMatrix {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Dense `dim × k` 0/1 matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.dim, self.k());
        for (j, &i) in self.indices.iter().enumerate() {
            s[(i, j)] = 1.0;
        }
        s
    }

    pub fn is_identity(&self) -> bool {
        self.k() == self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCompression {
    /// `k × d_hid`
    pub w_up: DMatrix<f64>,
    /// `d_hid × k`
    pub w_down: DMatrix<f64>,
    pub selection: SelectionMatrix,
}

/// `score_i = Σ_j Q_ij² λ_j / (λ_j + 1)` from the eigendecomposition of `C_σ`.
pub fn ridge_leverage(c_sigma: &DMatrix<f64>) -> Result<LeverageScores> {
    let eig = sym_eig_named("c_sigma", c_sigma)?;
    let d = eig.dim();
    let shrink: Vec<f64> = eig.values.iter().map(|l| l / (l + 1.0)).collect();
    let scores = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| eig.vectors[(i, j)].powi(2) * shrink[j])
                .sum::<f64>()
                .clamp(0.0, 1.0 - f64::EPSILON)
        })
        .collect();
    Ok(LeverageScores { scores })
}

/// Indices of the `k` largest scores, lower index first on ties, returned
/// sorted ascending.
pub fn select_topk(scores: &LeverageScores, k: usize) -> Result<SelectionMatrix> {
    let d = scores.scores.len();
    if k == 0 || k > d {
        return Err(FlatError::RankOutOfRange {
            what: "mlp keep-count".into(),
            rank: k,
            max: d,
        });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(SelectionMatrix { indices, dim: d })
}

fn well_conditioned(ch: &Cholesky<f64, Dyn>) -> bool {
    let l = ch.l_dirty();
    let piv: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = piv.iter().cloned().fold(0.0, f64::max);
    let min = piv.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > PIVOT_FLOOR * max
}

/// `(Sᵀ C S)⁻¹ Sᵀ C W₂` with `w2` in `d_int × d_hid` layout. Solved by
/// Cholesky; a near-singular block is damped by `ε I`.
pub fn nystrom_down_projection(
    c_sigma: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    selection: &SelectionMatrix,
) -> Result<DMatrix<f64>> {
    let d = c_sigma.nrows();
    if w2.nrows() != d || selection.dim != d {
        return Err(FlatError::ShapeMismatch {
            tensor: "w_down".into(),
            expected: vec![d, w2.ncols()],
            found: vec![w2.nrows(), w2.ncols()],
        });
    }
    let idx = &selection.indices;
    let k = idx.len();
    let block = DMatrix::from_fn(k, k, |i, j| c_sigma[(idx[i], idx[j])]);
    let rows = DMatrix::from_fn(k, d, |i, j| c_sigma[(idx[i], j)]);
    let rhs = rows * w2;

    if let Some(ch) = Cholesky::new(block.clone()) {
        if well_conditioned(&ch) {
            return Ok(ch.solve(&rhs));
        }
    }
    let damping = DAMPING * c_sigma.trace() / d as f64;
    let damped = block + DMatrix::identity(k, k) * damping;
    match Cholesky::new(damped) {
        Some(ch) if damping > 0.0 => Ok(ch.solve(&rhs)),
        _ => Err(FlatError::Singular {
            what: "selected c_sigma block".into(),
            damping,
        }),
    }
}

pub fn compress_mlp(
    weights: &DecoderWeights,
    c_sigma: &DMatrix<f64>,
    k: usize,
) -> Result<MlpCompression> {
    let d_int = weights.w_up.nrows();
    if c_sigma.shape() != (d_int, d_int) {
        return Err(FlatError::ShapeMismatch {
            tensor: "c_sigma".into(),
            expected: vec![d_int, d_int],
            found: vec![c_sigma.nrows(), c_sigma.ncols()],
        });
    }
    let scores = ridge_leverage(c_sigma)?;
    let selection = select_topk(&scores, k)?;
    if selection.is_identity() {
        // S = I: the reconstruction is W₂ itself.
        return Ok(MlpCompression {
            w_up: weights.w_up.clone(),
            w_down: weights.w_down.clone(),
            selection,
        });
    }
    let w_up = DMatrix::from_fn(k, weights.w_up.ncols(), |i, j| {
        weights.w_up[(selection.indices[i], j)]
    });
    let w2 = weights.w_down.transpose();
    let w_down = nystrom_down_projection(c_sigma, &w2, &selection)?.transpose();
    Ok(MlpCompression {
        w_up,
        w_down,
        selection,
    })
}
