//! Per-class Gaussian models of backbone image embeddings and replay sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{RapfError, Result};
use crate::rng::{self, Rng};

/// Absolute floor added to the trace-scaled ridge.
pub const SHRINKAGE_FLOOR: f64 = 1e-8;

/// Mean, shrunk covariance and its Cholesky factor for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub class_id: u32,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Lower triangular, `chol_factor * chol_factor^T == covariance`.
    pub chol_factor: DMatrix<f64>,
    pub sample_count: usize,
}

/// Unbiased sample mean and covariance.
pub fn sample_moments(embeddings: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = embeddings.len();
    let d = embeddings[0].len();
    let mean = embeddings.iter().fold(DVector::zeros(d), |acc, e| acc + e) / n as f64;
    let mut centered = DMatrix::zeros(d, n);
    for (j, e) in embeddings.iter().enumerate() {
        centered.set_column(j, &(e - &mean));
    }
    let cov = (&centered * centered.transpose()) / (n as f64 - 1.0);
    (mean, cov)
}

/// Ridge shrinkage scaled by the average variance:
/// `cov + gamma * (tr(cov) / d + SHRINKAGE_FLOOR) * I`.
pub fn shrink(cov: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let ridge = gamma * (cov.trace() / d as f64 + SHRINKAGE_FLOOR);
    let mut out = cov.clone();
    for i in 0..d {
        out[(i, i)] += ridge;
    }
    out
}

impl ClassStats {
    pub fn fit(class_id: u32, embeddings: &[DVector<f64>], shrinkage: f64) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(RapfError::InsufficientData(format!(
                "class {class_id}: {} embeddings, need at least 2",
                embeddings.len()
            )));
        }
        let d = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != d) {
            return Err(RapfError::Contract(format!(
                "class {class_id}: embeddings of mixed dimension"
            )));
        }
        if embeddings.iter().any(|e| e.iter().any(|x| !x.is_finite())) {
            return Err(RapfError::Numerical(format!(
                "class {class_id}: non-finite embedding"
            )));
        }
        if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
            return Err(RapfError::Config(format!(
                "shrinkage {shrinkage} must be >= 0"
            )));
        }
        let (mean, raw) = sample_moments(embeddings);
        let mut covariance = shrink(&raw, shrinkage);
        // exact symmetry; the product above is symmetric only up to rounding
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let chol_factor = match covariance.clone().cholesky() {
            Some(c) => c.unpack(),
            None => {
                let min_eig = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
                return Err(RapfError::Numerical(format!(
                    "class {class_id}: covariance not positive definite after shrinkage (min eigenvalue ~ {min_eig:e})"
                )));
            }
        };
        Ok(Self {
            class_id,
            mean,
            covariance,
            chol_factor,
            sample_count: embeddings.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws one feature `mean + L z`, `z ~ N(0, I)`.
    pub fn draw(&self, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::<f64>::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.chol_factor * z
    }

    pub fn draw_many(&self, rng: &mut Rng, count: usize) -> Vec<DVector<f64>> {
        (0..count).map(|_| self.draw(rng)).collect()
    }

    /// Draws `count` features from a fresh stream seeded by `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = rng::stream(seed, &[rng::tag::REPLAY, u64::from(self.class_id)]);
        self.draw_many(&mut rng, count)
    }
}

/// Fits a class model; free-function form of [`ClassStats::fit`].
pub fn fit_class(class_id: u32, embeddings: &[DVector<f64>], shrinkage: f64) -> Result<ClassStats> {
    ClassStats::fit(class_id, embeddings, shrinkage)
}
