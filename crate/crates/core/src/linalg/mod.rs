//! Dense linear algebra kernels: products, norms, SVD, and the matrix
//! exponential.

mod expm;
mod matrix;
mod svd;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use expm::expm;
pub use matrix::Matrix;
pub use svd::{singular_values, spectral_norm, svd, SvdResult};

use crate::error::{Error, Result};

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

pub fn column_norms(a: &Matrix) -> Vec<f64> {
    a.column_norms()
}

pub fn diag_right_mul(w: &Matrix, d: &[f64]) -> Result<Matrix> {
    w.diag_right_mul(d)
}

/// Entry distribution for [`random_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    /// Half-open `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl Distribution {
    fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidDistribution(format!(
                        "uniform needs finite lo < hi, got [{lo}, {hi})"
                    )));
                }
            }
            Distribution::Gaussian { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && std > 0.0) {
                    return Err(Error::InvalidDistribution(format!(
                        "gaussian needs finite mean and std > 0, got ({mean}, {std})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic random matrix for a given seed.
pub fn random_matrix(rows: usize, cols: usize, dist: Distribution, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_matrix_with(rows, cols, dist, &mut rng)
}

/// Like [`random_matrix`] but draws from a caller-owned generator.
pub fn random_matrix_with<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    dist: Distribution,
    rng: &mut R,
) -> Result<Matrix> {
    dist.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape {
            rows,
            cols,
            reason: "dimensions must be positive",
        });
    }
    let len = rows * cols;
    let data: Vec<f64> = match dist {
        Distribution::Uniform { lo, hi } => {
            let u = Uniform::new(lo, hi)
                .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
            rng.sample_iter(u).take(len).collect()
        }
        Distribution::Gaussian { mean, std } => {
            let g = Normal::new(mean, std)
                .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
            rng.sample_iter(g).take(len).collect()
        }
    };
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let d = Distribution::Gaussian { mean: 0.0, std: 1.0 };
        assert_eq!(
            random_matrix(5, 7, d, 42).unwrap(),
            random_matrix(5, 7, d, 42).unwrap()
        );
        assert_ne!(
            random_matrix(5, 7, d, 42).unwrap(),
            random_matrix(5, 7, d, 43).unwrap()
        );
    }

    #[test]
    fn gaussian_mean_is_near_zero() {
        let d = Distribution::Gaussian { mean: 0.0, std: 1.0 };
        let m = random_matrix(1000, 1000, d, 7).unwrap();
        let mean = m.data().iter().sum::<f64>() / 1e6;
        // Standard error is 1e-3.
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_range() {
        let m = random_matrix(50, 40, Distribution::Uniform { lo: 0.0, hi: 1.0 }, 3).unwrap();
        assert!(m.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn invalid_parameters() {
        assert!(random_matrix(2, 2, Distribution::Uniform { lo: 1.0, hi: 1.0 }, 0).is_err());
        assert!(random_matrix(2, 2, Distribution::Gaussian { mean: 0.0, std: -1.0 }, 0).is_err());
        assert!(random_matrix(2, 2, Distribution::Gaussian { mean: f64::NAN, std: 1.0 }, 0).is_err());
        assert!(random_matrix(0, 2, Distribution::Gaussian { mean: 0.0, std: 1.0 }, 0).is_err());
    }
}
