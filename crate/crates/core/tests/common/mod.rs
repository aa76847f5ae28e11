#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcond::adapters::{init_adapter, randomize_trainables, AdapterConfig, AdapterState};
use wcond::linalg::{random_matrix_with, Distribution};
use wcond::Matrix;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Singular values from nalgebra's bidiagonal SVD, sorted descending.
pub fn na_singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn oracle_entropy(sigma: &[f64]) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    -sigma
        .iter()
        .map(|s| s * s / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

pub fn gauss(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    random_matrix_with(rows, cols, Distribution::Gaussian { mean: 0.0, std }, rng).unwrap()
}

/// Random layer with every trainable factor away from its initial value.
pub fn random_state(cfg: &AdapterConfig, m: usize, n: usize, seed: u64) -> AdapterState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gauss(m, n, 1.0 / (n as f64).sqrt(), &mut rng);
    let mut state = init_adapter(&w, cfg, seed).unwrap();
    randomize_trainables(&mut state, cfg, 0.5, &mut rng).unwrap();
    state
}

use wcond::adapters::{AdapterMethod, SpPolicy};

/// Merged weight built directly from each method's definition in nalgebra.
pub fn oracle_merged(state: &AdapterState, cfg: &AdapterConfig) -> DMatrix<f64> {
    let w = to_na(&state.w_pre);
    let ba = to_na(&state.b) * to_na(&state.a) * cfg.scale;
    let n = w.ncols();
    let diag = || DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(state.diag.as_ref().unwrap()));
    let rotation = || {
        let dp = to_na(state.dp.as_ref().unwrap());
        let cp = to_na(state.cp.as_ref().unwrap());
        let sp = match cfg.sp_policy {
            SpPolicy::Fixed(v) => v,
            SpPolicy::Epsilon(eps) => eps / (2.0 * dp.norm() * cp.norm() + eps),
        };
        DMatrix::identity(n, n) + (&dp * cp.transpose() - &cp * dp.transpose()) * sp
    };
    match cfg.method {
        AdapterMethod::Lora => &w + &ba,
        AdapterMethod::Dora => {
            let v = &w + &ba;
            let mag = state.diag.as_ref().unwrap();
            let mut out = v.clone();
            for j in 0..n {
                let norm = v.column(j).norm();
                out.column_mut(j).scale_mut(mag[j] / norm);
            }
            out
        }
        AdapterMethod::PreDiag => &w * diag() + &ba,
        AdapterMethod::Sora => (&w * diag() + &ba) * rotation(),
        AdapterMethod::PreOrtho => &w * rotation() + &ba,
        AdapterMethod::PostOrtho => (&w + &ba) * rotation(),
    }
}

/// `½·mean((M·x − y)²)` with the oracle merged weight.
pub fn oracle_loss(state: &AdapterState, cfg: &AdapterConfig, x: &Matrix, y: &Matrix) -> f64 {
    let r = oracle_merged(state, cfg) * to_na(x) - to_na(y);
    0.5 * r.norm_squared() / (r.nrows() * r.ncols()) as f64
}
