//! Matrix exponential by scaling and squaring with a Taylor series.
//!
//! Used as the ground-truth exponential when checking first-order rotation
//! approximations, so it is tuned for accuracy rather than speed.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_TERMS: usize = 60;
// Scaled argument norm; with ‖X‖₁ ≤ 1/2 the series tail falls below
// round-off well before `MAX_TERMS`.
const SCALED_NORM: f64 = 0.5;

pub fn expm(j: &Matrix) -> Result<Matrix> {
    if !j.is_square() {
        return Err(Error::InvalidShape {
            rows: j.rows(),
            cols: j.cols(),
            reason: "matrix exponential needs a square matrix",
        });
    }
    if let Some(index) = j.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let n = j.rows();
    let norm = j.norm_one();
    let squarings = if norm > SCALED_NORM {
        (norm / SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    let x = j.scale(0.5_f64.powi(squarings));

    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=MAX_TERMS {
        term = term.matmul(&x)?;
        term.scale_in_place(1.0 / k as f64);
        sum.axpy(1.0, &term)?;
        if term.frobenius_norm() <= 1e-17 * sum.frobenius_norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum)?;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gives_identity() {
        assert_eq!(expm(&Matrix::zeros(4, 4)).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn plane_rotation() {
        let theta: f64 = 0.1;
        let j = Matrix::from_rows(&[&[0.0, theta], &[-theta, 0.0]]);
        let expected = Matrix::from_rows(&[
            &[theta.cos(), theta.sin()],
            &[-theta.sin(), theta.cos()],
        ]);
        assert!(expm(&j).unwrap().max_abs_diff(&expected).unwrap() <= 1e-15);

        // Large angle exercises the squaring phase.
        let theta: f64 = 7.3;
        let j = Matrix::from_rows(&[&[0.0, theta], &[-theta, 0.0]]);
        let expected = Matrix::from_rows(&[
            &[theta.cos(), theta.sin()],
            &[-theta.sin(), theta.cos()],
        ]);
        assert!(expm(&j).unwrap().max_abs_diff(&expected).unwrap() <= 1e-13);
    }

    #[test]
    fn scalar_exponential() {
        let e = expm(&Matrix::from_rows(&[&[2.5]])).unwrap();
        assert!((e[(0, 0)] - 2.5f64.exp()).abs() <= 1e-14 * 2.5f64.exp());
        let e = expm(&Matrix::from_diag(&[-1.0, 0.5])).unwrap();
        assert!((e[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((e[(1, 1)] - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_square() {
        assert!(expm(&Matrix::zeros(2, 3)).is_err());
    }
}
