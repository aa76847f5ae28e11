//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations, and
//! the spectral norm by power iteration.
//!
//! One-sided Jacobi orthogonalizes the columns of `A` in place; at
//! convergence the column norms are the singular values. It is slower than
//! bidiagonalization but delivers small singular values to high relative
//! accuracy, which the entropy metrics depend on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    /// Non-increasing, length `min(rows, cols)`, never truncated.
    pub singular_values: Vec<f64>,
    /// `rows × k` with `k = min(rows, cols)`. Columns paired with a zero
    /// singular value are zero.
    pub left_vectors: Option<Matrix>,
    /// `cols × k`.
    pub right_vectors: Option<Matrix>,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ`, when vectors were computed.
    pub fn reconstruct(&self) -> Option<Matrix> {
        let u = self.left_vectors.as_ref()?;
        let v = self.right_vectors.as_ref()?;
        let us = u.diag_right_mul(&self.singular_values).ok()?;
        us.matmul_nt(v).ok()
    }
}

/// Full SVD with left and right singular vectors.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    jacobi_svd(a, true)
}

/// Singular values only.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(jacobi_svd(a, false)?.singular_values)
}

fn jacobi_svd(a: &Matrix, want_vectors: bool) -> Result<SvdResult> {
    let wide = a.rows() < a.cols();
    // Rows of `work` are the columns being orthogonalized (length `len`).
    let mut work = if wide { a.clone() } else { a.transpose() };
    let k = work.rows();
    let len = work.cols();
    let mut vt = want_vectors.then(|| Matrix::identity(k));

    let tol = f64::EPSILON * (len as f64).sqrt();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = sq_norm(work.row(p));
                let beta = sq_norm(work.row(q));
                if alpha < f64::MIN_POSITIVE || beta < f64::MIN_POSITIVE {
                    continue;
                }
                let gamma = dot(work.row(p), work.row(q));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
                if let Some(vt) = vt.as_mut() {
                    rotate_rows(vt, p, q, c, s);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = (0..k).map(|i| sq_norm(work.row(i)).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let singular_values: Vec<f64> = order.iter().map(|&i| norms[i]).collect();

    let (left_vectors, right_vectors) = match vt {
        None => (None, None),
        Some(vt) => {
            // `work` rows are σ_i u_i (or σ_i v_i for the wide case).
            let mut scaled = Matrix::zeros(len, k);
            let mut other = Matrix::zeros(k, k);
            for (dst, &src) in order.iter().enumerate() {
                let sigma = norms[src];
                if sigma > 0.0 {
                    for (i, &v) in work.row(src).iter().enumerate() {
                        scaled[(i, dst)] = v / sigma;
                    }
                }
                for (i, &v) in vt.row(src).iter().enumerate() {
                    other[(i, dst)] = v;
                }
            }
            if wide {
                (Some(other), Some(scaled))
            } else {
                (Some(scaled), Some(other))
            }
        }
    };

    Ok(SvdResult {
        singular_values,
        left_vectors,
        right_vectors,
    })
}

fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

const POWER_MAX_ITERS: usize = 1000;
const POWER_REL_TOL: f64 = 1e-12;
const POWER_RESTART_SEED: u64 = 0x5eed_0f_5a;

/// Largest singular value. Power iteration on `AᵀA` from the normalized
/// all-ones vector; falls back to the SVD if it fails to converge.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.frobenius_norm() == 0.0 {
        return 0.0;
    }
    match power_iteration(a) {
        Some(sigma) => sigma,
        None => singular_values(a)
            .map(|s| s[0])
            .unwrap_or_else(|_| a.frobenius_norm()),
    }
}

fn power_iteration(a: &Matrix) -> Option<f64> {
    let n = a.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut restarts = ChaCha8Rng::seed_from_u64(POWER_RESTART_SEED);
    let mut prev = f64::NAN;

    for _ in 0..POWER_MAX_ITERS {
        let av = mat_vec(a, &v);
        let w = mat_t_vec(a, &av);
        let lambda = dot(&av, &av);
        let w_norm = sq_norm(&w).sqrt();
        if w_norm == 0.0 || !w_norm.is_finite() {
            // Stagnated in the null space: restart from a reproducible random vector.
            v = (0..n).map(|_| restarts.random_range(-1.0..1.0)).collect();
            let norm = sq_norm(&v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            prev = f64::NAN;
            continue;
        }
        if (lambda - prev).abs() <= POWER_REL_TOL * lambda {
            return Some(lambda.sqrt());
        }
        prev = lambda;
        v = w.into_iter().map(|x| x / w_norm).collect();
    }
    None
}

fn mat_vec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), v)).collect()
}

fn mat_t_vec(a: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(a.row(i)) {
            *o += ui * x;
        }
    }
    out
}
