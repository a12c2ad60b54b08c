//! Symmetric eigendecomposition, top-r truncation and projection error.
//!
//! All arithmetic is f64. Eigenpairs come back sorted by eigenvalue
//! descending; eigenvectors are sign-canonicalised (first component with
//! magnitude above 1e-12 made positive) and eigenvalues that agree within
//! `1e-12 · λ_max` are ordered lexicographically by their canonical vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FlatError, Result};

/// Relative floor below which a negative eigenvalue means a corrupted input.
pub const NEG_EIG_TOL: f64 = 1e-10;
/// Relative asymmetry tolerated before symmetrisation.
pub const SYM_TOL: f64 = 1e-10;
const TIE_TOL: f64 = 1e-12;
const SIGN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    /// Orthonormal eigenvectors as columns.
    pub vectors: DMatrix<f64>,
    /// Non-increasing, clamped at zero.
    pub values: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedBasis {
    /// `d × r`, the leading `r` eigenvectors.
    pub basis: DMatrix<f64>,
}

impl TruncatedBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `Y Q̃ Q̃ᵀ`.
    pub fn project(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        (y * &self.basis) * self.basis.transpose()
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Fails unless `‖C − Cᵀ‖_max ≤ SYM_TOL · ‖C‖_max`.
pub fn check_symmetric(what: &str, c: &DMatrix<f64>) -> Result<()> {
    if !c.is_square() {
        return Err(FlatError::ShapeMismatch {
            tensor: what.to_string(),
            expected: vec![c.nrows(), c.nrows()],
            found: vec![c.nrows(), c.ncols()],
        });
    }
    let scale = max_abs(c);
    let deviation = max_abs(&(c - c.transpose()));
    if deviation > SYM_TOL * scale {
        return Err(FlatError::Asymmetric {
            what: what.to_string(),
            deviation,
            scale,
        });
    }
    Ok(())
}

pub fn sym_eig(c: &DMatrix<f64>) -> Result<EigenDecomposition> {
    sym_eig_named("matrix", c)
}

pub fn sym_eig_named(what: &str, c: &DMatrix<f64>) -> Result<EigenDecomposition> {
    crate::model::check_finite(what, c.as_slice())?;
    check_symmetric(what, c)?;
    let d = c.nrows();
    if c.iter().all(|&x| x == 0.0) {
        return Ok(EigenDecomposition {
            vectors: DMatrix::identity(d, d),
            values: DVector::zeros(d),
        });
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
        .map(|j| {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            if let Some(&lead) = v.iter().find(|x| x.abs() > SIGN_TOL) {
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            (eig.eigenvalues[j], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let largest = pairs[0].0;
    let scale = pairs.iter().fold(0.0f64, |a, p| a.max(p.0.abs()));
    if let Some(p) = pairs.iter().find(|p| p.0 < -NEG_EIG_TOL * scale) {
        return Err(FlatError::NotPsd {
            what: what.to_string(),
            eigenvalue: p.0,
            largest,
        });
    }

    // Order near-equal clusters by canonical eigenvector.
    let tie = TIE_TOL * scale;
    let mut start = 0;
    while start < d {
        let mut end = start + 1;
        while end < d && pairs[end - 1].0 - pairs[end].0 <= tie {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|a, b| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| y.total_cmp(x))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        start = end;
    }

    let values = DVector::from_iterator(d, pairs.iter().map(|p| p.0.max(0.0)));
    let vectors = DMatrix::from_fn(d, d, |i, j| pairs[j].1[i]);
    Ok(EigenDecomposition { vectors, values })
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Sum of the eigenvalues dropped by a rank-`r` truncation.
    pub fn tail_sum(&self, r: usize) -> f64 {
        self.values.iter().skip(r).sum()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

pub fn truncate(eig: &EigenDecomposition, r: usize) -> Result<TruncatedBasis> {
    let d = eig.dim();
    if r == 0 || r > d {
        return Err(FlatError::RankOutOfRange {
            what: "truncation".into(),
            rank: r,
            max: d,
        });
    }
    Ok(TruncatedBasis {
        basis: eig.vectors.columns(0, r).into_owned(),
    })
}

/// `‖Y − Y Q̃ Q̃ᵀ‖_F²`.
pub fn reconstruction_error(y: &DMatrix<f64>, basis: &TruncatedBasis) -> Result<f64> {
    if y.ncols() != basis.dim() {
        return Err(FlatError::ShapeMismatch {
            tensor: "activations".into(),
            expected: vec![y.nrows(), basis.dim()],
            found: vec![y.nrows(), y.ncols()],
        });
    }
    Ok((y - basis.project(y)).norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn orthonormality_err(q: &DMatrix<f64>) -> f64 {
        let n = q.ncols();
        max_abs(&(q.transpose() * q - DMatrix::<f64>::identity(n, n)))
    }

    #[test]
    fn identity_spectrum() {
        let e = sym_eig(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0; 4]);
        assert!(orthonormality_err(&e.vectors) <= 1e-10);
        assert!(max_abs(&(e.reconstruct() - DMatrix::<f64>::identity(4, 4))) <= 1e-12);
    }

    #[test]
    fn diagonal_case() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let e = sym_eig(&c).unwrap();
        assert_eq!(e.values.as_slice(), &[4.0, 1.0]);
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_relative_eq!(e.vectors, expect, epsilon = 1e-14);

        let b = truncate(&e, 1).unwrap();
        assert_relative_eq!(b.basis[(1, 0)].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_matrix_is_valid() {
        let e = sym_eig(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e.values, DVector::zeros(3));
        assert_eq!(e.vectors, DMatrix::identity(3, 3));
        let y = DMatrix::zeros(5, 3);
        let b = truncate(&e, 1).unwrap();
        assert_eq!(reconstruction_error(&y, &b).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let mut c = DMatrix::identity(2, 2);
        c[(0, 1)] = f64::INFINITY;
        assert!(matches!(sym_eig(&c), Err(FlatError::NonFinite { .. })));

        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sym_eig(&c), Err(FlatError::Asymmetric { .. })));

        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(sym_eig(&c), Err(FlatError::NotPsd { .. })));

        // tiny negative noise is clamped
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-14]));
        assert_eq!(sym_eig(&c).unwrap().values[1], 0.0);

        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert!(truncate(&e, 0).is_err());
        assert!(truncate(&e, 4).is_err());
        let b = truncate(&e, 2).unwrap();
        assert!(reconstruction_error(&DMatrix::zeros(2, 4), &b).is_err());
    }

    #[test]
    fn full_rank_truncation_is_complete() {
        let a = DMatrix::from_fn(7, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let e = sym_eig(&(a.transpose() * &a)).unwrap();
        let b = truncate(&e, 5).unwrap();
        let p = &b.basis * b.basis.transpose();
        assert!(max_abs(&(p - DMatrix::<f64>::identity(5, 5))) <= 1e-10);
        assert!(reconstruction_error(&a, &b).unwrap() <= 1e-10 * a.norm_squared());
    }

    #[test]
    fn rank_one_input_is_exact() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let v = DVector::from_vec(vec![0.3, 0.1, -0.7]);
        let y = &u * v.transpose();
        let e = sym_eig(&(y.transpose() * &y)).unwrap();
        let b = truncate(&e, 1).unwrap();
        assert!(reconstruction_error(&y, &b).unwrap() <= 1e-10 * y.norm_squared());
    }

    #[test]
    fn repeated_eigenvalue_tie_break_is_stable() {
        // spectrum {3, 3, 1} in a rotated frame
        let q = sym_eig(&DMatrix::from_fn(3, 3, |i, j| 1.0 / (1 + i + j) as f64))
            .unwrap()
            .vectors;
        let c = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 3.0, 1.0])) * q.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let first = sym_eig(&c).unwrap();
        for _ in 0..5 {
            assert_eq!(sym_eig(&c).unwrap(), first);
        }
        // canonical signs and lexicographic order inside the tie
        for j in 0..3 {
            let lead = first.vectors.column(j).iter().copied().find(|x| x.abs() > 1e-12).unwrap();
            assert!(lead > 0.0);
        }
        let c0: Vec<f64> = first.vectors.column(0).iter().copied().collect();
        let c1: Vec<f64> = first.vectors.column(1).iter().copied().collect();
        assert!(c0 >= c1);
    }

    #[test]
    fn projection_idempotent() {
        let a = DMatrix::from_fn(9, 6, |i, j| ((i * 7 + j * 3) as f64).cos());
        let e = sym_eig(&(a.transpose() * &a)).unwrap();
        let b = truncate(&e, 3).unwrap();
        let once = b.project(&a);
        let twice = b.project(&once);
        assert!(max_abs(&(twice - &once)) <= 1e-12 * max_abs(&a).max(1.0));
    }
}
