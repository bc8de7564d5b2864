//! Decomposed parameter fusion of consecutive adapter weights.
//!
//! The previous weight is factored as `W_old = B R_old` with `B` the left
//! singular vectors and `R_old = S V^T`; the new weight is expressed in the
//! same basis as `R_new = B^T W_new`. Coefficients are blended entrywise by an
//! importance mask built from the normalized coefficient change, and the fused
//! weight is `B R`.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{RapfError, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Constant added to the normalized change before clamping at 1.
    pub bias_b: f64,
    /// Blend in the SVD basis of `W_old`; `false` blends the raw weights.
    pub decompose: bool,
    /// Largest change treated as "no change at all".
    pub zero_change_epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            bias_b: 0.0,
            decompose: true,
            zero_change_epsilon: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionTrace {
    pub basis: DMatrix<f64>,
    pub r_old: DMatrix<f64>,
    pub r_new: DMatrix<f64>,
    pub mask: DMatrix<f64>,
    pub fused_r: DMatrix<f64>,
    pub weight: DMatrix<f64>,
    pub zero_change: bool,
    /// Entries whose unclamped mask value reached 1.
    pub clamped: usize,
    /// `|B R_old - W_old|_F / |W_old|_F`.
    pub reconstruction_residual: f64,
}

/// Scalar digest of a [`FusionTrace`] for reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub mean_mask: f64,
    pub clamped_fraction: f64,
    pub reconstruction_residual: f64,
    pub zero_change: bool,
    pub max_coefficient_change: f64,
}

impl FusionTrace {
    pub fn summary(&self) -> FusionSummary {
        let n = self.mask.len() as f64;
        FusionSummary {
            mean_mask: self.mask.sum() / n,
            clamped_fraction: self.clamped as f64 / n,
            reconstruction_residual: self.reconstruction_residual,
            zero_change: self.zero_change,
            max_coefficient_change: (&self.r_new - &self.r_old).amax(),
        }
    }
}

fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Full SVD of `w_old`: returns `(B, R_old)` with `B = U` and `R_old = S V^T`.
pub fn decompose(w_old: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !w_old.is_square() {
        return Err(RapfError::Contract("fusion expects square weights".into()));
    }
    if w_old.iter().any(|x| !x.is_finite()) {
        return Err(RapfError::Numerical("non-finite weight".into()));
    }
    let svd = SVD::try_new(w_old.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| RapfError::Numerical("SVD did not converge".into()))?;
    let u = svd
        .u
        .ok_or_else(|| RapfError::Numerical("SVD returned no U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| RapfError::Numerical("SVD returned no V^T".into()))?;
    let mut r_old = v_t;
    for (mut row, s) in r_old.row_iter_mut().zip(svd.singular_values.iter()) {
        row *= *s;
    }
    Ok((u, r_old))
}

pub fn is_orthonormal(basis: &DMatrix<f64>) -> bool {
    basis.is_square()
        && (basis.transpose() * basis - DMatrix::identity(basis.nrows(), basis.ncols())).norm()
            < ORTHONORMAL_TOL
}

/// Coefficients of `w_new` in the orthonormal `basis`: `B^T W_new`.
pub fn project(basis: &DMatrix<f64>, w_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_orthonormal(basis) {
        return Err(RapfError::Contract(
            "projection basis is not orthonormal".into(),
        ));
    }
    if basis.nrows() != w_new.nrows() {
        return Err(RapfError::Contract("basis/weight shape mismatch".into()));
    }
    Ok(basis.transpose() * w_new)
}

/// `min(1, |R_new - R_old| / max|R_new - R_old| + b)`.
///
/// When the largest change is below `zero_change_epsilon` the normalized term
/// is taken as 0, giving `min(1, b)` everywhere; the returned flag reports it.
/// Also returns the number of entries clamped to 1.
pub fn importance_mask(
    r_new: &DMatrix<f64>,
    r_old: &DMatrix<f64>,
    bias_b: f64,
    zero_change_epsilon: f64,
) -> (DMatrix<f64>, bool, usize) {
    let delta = (r_new - r_old).abs();
    let max = delta.max();
    let zero_change = max.is_nan() || max < zero_change_epsilon;
    let mut clamped = 0;
    let mask = delta.map(|x| {
        let raw = if zero_change {
            bias_b
        } else {
            x / max + bias_b
        };
        if raw >= 1.0 {
            clamped += 1;
            1.0
        } else {
            raw.max(0.0)
        }
    });
    (mask, zero_change, clamped)
}

/// Fuses the previous and current adapter weights.
pub fn fuse(
    w_old: &DMatrix<f64>,
    w_new: &DMatrix<f64>,
    config: &FusionConfig,
) -> Result<(DMatrix<f64>, FusionTrace)> {
    if !(0.0..=1.0).contains(&config.bias_b) {
        return Err(RapfError::Config(format!(
            "bias_b {} outside [0, 1]",
            config.bias_b
        )));
    }
    if w_old.shape() != w_new.shape() {
        return Err(RapfError::Contract("fusion weights differ in shape".into()));
    }
    if w_new.iter().any(|x| !x.is_finite()) {
        return Err(RapfError::Numerical("non-finite weight".into()));
    }
    let (basis, r_old, r_new) = if config.decompose {
        let (b, r_old) = decompose(w_old)?;
        let r_new = project(&b, w_new)?;
        (b, r_old, r_new)
    } else {
        if w_old.iter().any(|x| !x.is_finite()) {
            return Err(RapfError::Numerical("non-finite weight".into()));
        }
        let d = w_old.nrows();
        (DMatrix::identity(d, d), w_old.clone(), w_new.clone())
    };
    let reconstruction_residual = relative_frobenius(&(&basis * &r_old), w_old);
    let (mask, zero_change, clamped) =
        importance_mask(&r_new, &r_old, config.bias_b, config.zero_change_epsilon);
    let fused_r = mask.map(|m| 1.0 - m).component_mul(&r_old) + mask.component_mul(&r_new);
    let weight = &basis * &fused_r;
    let trace = FusionTrace {
        basis,
        r_old,
        r_new,
        mask,
        fused_r,
        weight: weight.clone(),
        zero_change,
        clamped,
        reconstruction_residual,
    };
    Ok((weight, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_decomposes_losslessly() {
        let i = DMatrix::<f64>::identity(5, 5);
        let (b, r) = decompose(&i).unwrap();
        assert_relative_eq!(&b * &r, i, epsilon = 1e-14);
        assert!(is_orthonormal(&b));
    }

    #[test]
    fn diagonal_singular_values() {
        let w = DMatrix::from_diagonal(&nalgebra::dvector![3.0, 2.0]);
        let (b, r) = decompose(&w).unwrap();
        let mut sv: Vec<f64> = r.row_iter().map(|row| row.norm()).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert_relative_eq!(sv[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(sv[1], 2.0, epsilon = 1e-14);
        assert_relative_eq!(&b * &r, w, epsilon = 1e-14);
    }

    #[test]
    fn projection_of_basis_is_identity() {
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, -1.0, 3.0, 0.5, 0.0, 0.2, 1.0]);
        let (b, r_old) = decompose(&w).unwrap();
        assert_relative_eq!(
            project(&b, &b).unwrap(),
            DMatrix::identity(3, 3),
            epsilon = 1e-12
        );
        assert_relative_eq!(project(&b, &w).unwrap(), r_old, epsilon = 1e-12);
        assert!(project(&(b * 2.0), &w).is_err());
    }

    #[test]
    fn mask_examples() {
        let r_old = DMatrix::zeros(2, 2);
        let r_new = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.0, 0.25]);
        let (m, zero, clamped) = importance_mask(&r_new, &r_old, 0.0, 1e-12);
        assert!(!zero);
        assert_eq!(clamped, 1);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.25]));

        let (m, _, clamped) = importance_mask(&r_new, &r_old, 1.0, 1e-12);
        assert_eq!(m, DMatrix::from_element(2, 2, 1.0));
        assert_eq!(clamped, 4);

        let (m, zero, _) = importance_mask(&r_new, &r_new, 0.3, 1e-12);
        assert!(zero);
        assert_eq!(m, DMatrix::from_element(2, 2, 0.3));
    }

    #[test]
    fn endpoints() {
        let w_old = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.9]);
        let w_new = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, -0.2, 1.3]);
        for decompose in [true, false] {
            let cfg = FusionConfig {
                bias_b: 1.0,
                decompose,
                ..Default::default()
            };
            let (w, _) = fuse(&w_old, &w_new, &cfg).unwrap();
            assert_relative_eq!(w, w_new, epsilon = 1e-12);
            let cfg = FusionConfig {
                decompose,
                ..Default::default()
            };
            let (w, t) = fuse(&w_old, &w_old, &cfg).unwrap();
            assert!(t.zero_change);
            assert_relative_eq!(w, w_old, epsilon = 1e-12);
        }
        let cfg = FusionConfig {
            bias_b: 1.0,
            decompose: false,
            ..Default::default()
        };
        assert_eq!(fuse(&w_old, &w_new, &cfg).unwrap().0, w_new);
    }

    #[test]
    fn undecomposed_trace_uses_identity_basis() {
        let w_old = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.9]);
        let w_new = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, -0.2, 1.3]);
        let cfg = FusionConfig {
            decompose: false,
            ..Default::default()
        };
        let (_, t) = fuse(&w_old, &w_new, &cfg).unwrap();
        assert_eq!(t.basis, DMatrix::identity(2, 2));
        assert_eq!(t.r_old, w_old);
        assert_eq!(t.r_new, w_new);
        assert!(fuse(&w_old, &w_new, &FusionConfig { bias_b: 1.5, ..cfg }).is_err());
    }
}
