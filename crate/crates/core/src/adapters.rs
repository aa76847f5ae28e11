//! The weight-conditioning adapter family.
//!
//! Layout: `W ∈ ℝ^{m×n}` with `m` outputs and `n` inputs, `y = W·x`. Every
//! conditioning matrix acts on the right, so diagonals and rotations are
//! `n×n`.
//!
//! | method     | merged weight                 |
//! |------------|-------------------------------|
//! | LoRA       | `W_pre + s·BA`                |
//! | DoRA       | `(W_pre + s·BA)·D`, `D = Diag(m / ‖W_pre + s·BA‖_c)` |
//! | Pre-Diag   | `W_pre·D + s·BA`              |
//! | SORA       | `(W_pre·D + s·BA)·P`          |
//! | Pre-Ortho  | `W_pre·P + s·BA`              |
//! | Post-Ortho | `(W_pre + s·BA)·P`            |
//!
//! with `P = I + s_P·S_P` and `S_P = D_P C_Pᵀ − C_P D_Pᵀ`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_matrix_with, Distribution, Matrix};

/// Columns of `W_pre + s·BA` with a smaller norm are a hard error.
pub const DEGENERATE_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMethod {
    Lora,
    Dora,
    PreDiag,
    Sora,
    PreOrtho,
    PostOrtho,
}

impl AdapterMethod {
    pub const ALL: [AdapterMethod; 6] = [
        AdapterMethod::Lora,
        AdapterMethod::Dora,
        AdapterMethod::PreDiag,
        AdapterMethod::Sora,
        AdapterMethod::PreOrtho,
        AdapterMethod::PostOrtho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterMethod::Lora => "lora",
            AdapterMethod::Dora => "dora",
            AdapterMethod::PreDiag => "prediag",
            AdapterMethod::Sora => "sora",
            AdapterMethod::PreOrtho => "preortho",
            AdapterMethod::PostOrtho => "postortho",
        }
    }

    /// Carries a per-column vector (DoRA magnitude or a diagonal `d`).
    pub fn has_diag(self) -> bool {
        matches!(
            self,
            AdapterMethod::Dora | AdapterMethod::PreDiag | AdapterMethod::Sora
        )
    }

    /// Carries the skew factors `D_P`, `C_P`.
    pub fn has_rotation(self) -> bool {
        matches!(
            self,
            AdapterMethod::Sora | AdapterMethod::PreOrtho | AdapterMethod::PostOrtho
        )
    }
}

impl fmt::Display for AdapterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        AdapterMethod::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown adapter method {s:?}")))
    }
}

/// How the rotation step size `s_P` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "lowercase")]
pub enum SpPolicy {
    Fixed(f64),
    /// `s_P = ε / (2‖D_P‖_F‖C_P‖_F + ε)`, which keeps `‖exp(s_P S_P) − I‖₂ ≤ ε`.
    Epsilon(f64),
}

impl Default for SpPolicy {
    fn default() -> Self {
        SpPolicy::Epsilon(0.01)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub method: AdapterMethod,
    pub rank: usize,
    pub scale: f64,
    pub rotation_rank: usize,
    pub sp_policy: SpPolicy,
}

impl AdapterConfig {
    /// Defaults: `s = α/r` with `α = 2r`, `r_P = 1`, `ε = 0.01`.
    pub fn new(method: AdapterMethod, rank: usize) -> Self {
        Self {
            method,
            rank,
            scale: 2.0,
            rotation_rank: 1,
            sp_policy: SpPolicy::default(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_rotation_rank(mut self, rotation_rank: usize) -> Self {
        self.rotation_rank = rotation_rank;
        self
    }

    pub fn with_sp_policy(mut self, sp_policy: SpPolicy) -> Self {
        self.sp_policy = sp_policy;
        self
    }

    pub fn with_method(mut self, method: AdapterMethod) -> Self {
        self.method = method;
        self
    }

    /// Checks the configuration against an `m×n` layer.
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        if self.rank == 0 || self.rank > m.min(n) {
            return Err(Error::InvalidConfig(format!(
                "rank {} must lie in [1, min({m}, {n})]",
                self.rank
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.method.has_rotation() {
            if self.rotation_rank == 0 || self.rotation_rank > n {
                return Err(Error::InvalidConfig(format!(
                    "rotation rank {} must lie in [1, {n}]",
                    self.rotation_rank
                )));
            }
            match self.sp_policy {
                SpPolicy::Epsilon(eps) if !(eps.is_finite() && eps > 0.0) => {
                    return Err(Error::InvalidConfig(format!(
                        "epsilon must be positive, got {eps}"
                    )));
                }
                SpPolicy::Fixed(sp) if !(sp.is_finite() && sp >= 0.0) => {
                    return Err(Error::InvalidConfig(format!(
                        "fixed s_P must be non-negative, got {sp}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Frozen and trainable tensors of one adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    /// `m×n`, frozen.
    pub w_pre: Matrix,
    /// `r×n`.
    pub a: Matrix,
    /// `m×r`.
    pub b: Matrix,
    /// DoRA magnitude, or the Pre-Diag/SORA diagonal. Length `n`.
    pub diag: Option<Vec<f64>>,
    /// `n×r_P`.
    pub dp: Option<Matrix>,
    /// `n×r_P`.
    pub cp: Option<Matrix>,
}

impl AdapterState {
    pub fn out_dim(&self) -> usize {
        self.w_pre.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w_pre.cols()
    }

    /// Verifies that the tensors present and their shapes match `config`.
    pub fn check(&self, config: &AdapterConfig) -> Result<()> {
        let method = config.method.name();
        let mismatch = |reason: String| Error::StateMismatch { method, reason };
        let (m, n) = self.w_pre.shape();
        let r = config.rank;
        if self.a.shape() != (r, n) {
            return Err(mismatch(format!("A is {:?}, expected ({r}, {n})", self.a.shape())));
        }
        if self.b.shape() != (m, r) {
            return Err(mismatch(format!("B is {:?}, expected ({m}, {r})", self.b.shape())));
        }
        match (&self.diag, config.method.has_diag()) {
            (Some(d), true) if d.len() != n => {
                return Err(mismatch(format!("diagonal has length {}, expected {n}", d.len())))
            }
            (None, true) => return Err(mismatch("missing diagonal vector".into())),
            (Some(_), false) => return Err(mismatch("unexpected diagonal vector".into())),
            _ => {}
        }
        if config.method.has_rotation() {
            let rp = config.rotation_rank;
            for (name, t) in [("D_P", &self.dp), ("C_P", &self.cp)] {
                match t {
                    None => return Err(mismatch(format!("missing {name}"))),
                    Some(t) if t.shape() != (n, rp) => {
                        return Err(mismatch(format!(
                            "{name} is {:?}, expected ({n}, {rp})",
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
        } else if self.dp.is_some() || self.cp.is_some() {
            return Err(mismatch("unexpected rotation factors".into()));
        }
        Ok(())
    }

    fn rotation_factors(&self) -> (&Matrix, &Matrix) {
        (
            self.dp.as_ref().expect("checked rotation factors"),
            self.cp.as_ref().expect("checked rotation factors"),
        )
    }

    fn diag_vec(&self) -> &[f64] {
        self.diag.as_deref().expect("checked diagonal")
    }
}

/// Zero-delta initialization: `A ~ U(−1/√n, 1/√n)`, `B = 0`, DoRA magnitude
/// = column norms of `W_pre`, `d = 1`, `D_P ~ N(0, 0.02)`, `C_P = 0`.
pub fn init_adapter(w_pre: &Matrix, config: &AdapterConfig, seed: u64) -> Result<AdapterState> {
    let (m, n) = w_pre.shape();
    config.validate(m, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (n as f64).sqrt();
    let a = random_matrix_with(
        config.rank,
        n,
        Distribution::Uniform {
            lo: -bound,
            hi: bound,
        },
        &mut rng,
    )?;
    let b = Matrix::zeros(m, config.rank);
    let diag = match config.method {
        AdapterMethod::Dora => Some(w_pre.column_norms()),
        AdapterMethod::PreDiag | AdapterMethod::Sora => Some(vec![1.0; n]),
        _ => None,
    };
    let (dp, cp) = if config.method.has_rotation() {
        let dp = random_matrix_with(
            n,
            config.rotation_rank,
            Distribution::Gaussian {
                mean: 0.0,
                std: 0.02,
            },
            &mut rng,
        )?;
        (Some(dp), Some(Matrix::zeros(n, config.rotation_rank)))
    } else {
        (None, None)
    };
    Ok(AdapterState {
        w_pre: w_pre.clone(),
        a,
        b,
        diag,
        dp,
        cp,
    })
}

/// Moves every trainable tensor away from its initialization so that no
/// factor is zero. Used to build non-trivial instances for checks and
/// benchmarks; `spread` is the relative perturbation size.
pub fn randomize_trainables<R: Rng + ?Sized>(
    state: &mut AdapterState,
    config: &AdapterConfig,
    spread: f64,
    rng: &mut R,
) -> Result<()> {
    let (m, n) = state.w_pre.shape();
    let gauss = |std: f64| Distribution::Gaussian { mean: 0.0, std };
    let w_scale = state.w_pre.frobenius_norm() / ((m * n) as f64).sqrt();
    let w_scale = if w_scale > 0.0 { w_scale } else { 1.0 };
    state.b = random_matrix_with(m, config.rank, gauss(spread * w_scale), rng)?;
    if let Some(d) = state.diag.as_mut() {
        let noise = random_matrix_with(1, n, gauss(spread), rng)?;
        for (v, e) in d.iter_mut().zip(noise.data()) {
            *v *= 1.0 + e;
        }
    }
    if config.method.has_rotation() {
        let rp = config.rotation_rank;
        state.dp = Some(random_matrix_with(n, rp, gauss(spread), rng)?);
        state.cp = Some(random_matrix_with(n, rp, gauss(spread), rng)?);
    }
    Ok(())
}

fn expect_method(config: &AdapterConfig, allowed: &[AdapterMethod], op: &str) -> Result<()> {
    if allowed.contains(&config.method) {
        Ok(())
    } else {
        Err(Error::StateMismatch {
            method: config.method.name(),
            reason: format!("{op} does not apply to this method"),
        })
    }
}

/// `V = W_pre + s·BA`, materialized.
fn lora_sum(state: &AdapterState, scale: f64) -> Result<Matrix> {
    let mut v = state.w_pre.clone();
    v.gemm_acc(scale, &state.b, &state.a)?;
    Ok(v)
}

fn check_columns(norms: &[f64]) -> Result<()> {
    for (column, &norm) in norms.iter().enumerate() {
        if !(norm >= DEGENERATE_COLUMN_NORM) {
            return Err(Error::DegenerateColumn { column, norm });
        }
    }
    Ok(())
}

/// DoRA exactly as written: normalize each column of `W_pre + s·BA`, then
/// rescale by the magnitude vector.
pub fn dora_merged_original(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    expect_method(config, &[AdapterMethod::Dora], "dora_merged_original")?;
    state.check(config)?;
    let v = lora_sum(state, config.scale)?;
    let norms = v.column_norms();
    check_columns(&norms)?;
    let scale: Vec<f64> = state
        .diag_vec()
        .iter()
        .zip(&norms)
        .map(|(mag, norm)| mag / norm)
        .collect();
    v.diag_right_mul(&scale)
}

/// Column norms of `V = W_pre + s·BA` and the product `BᵀW_pre`, computed
/// without forming `V`:
/// `‖V_j‖² = ‖W_j‖² + 2s·⟨(BᵀW)_j, A_j⟩ + s²·A_jᵀ(BᵀB)A_j`.
pub(crate) struct DoraColumns {
    pub norms: Vec<f64>,
    pub btw: Matrix,
}

pub(crate) fn dora_columns(state: &AdapterState, scale: f64) -> Result<DoraColumns> {
    let (w, a, b) = (&state.w_pre, &state.a, &state.b);
    let (r, n) = a.shape();
    if b.shape() != (w.rows(), r) || w.cols() != n {
        return Err(Error::DimensionMismatch { op: "dora_columns", lhs: b.shape(), rhs: w.shape() });
    }
    // One pass over W_pre for both ‖W_j‖² and BᵀW.
    let mut w_sq = vec![0.0; n];
    let mut btw = Matrix::zeros(r, n);
    for i in 0..w.rows() {
        let w_row = w.row(i);
        for (acc, &v) in w_sq.iter_mut().zip(w_row) {
            *acc += v * v;
        }
        for (k, &bik) in b.row(i).iter().enumerate() {
            if bik != 0.0 {
                for (o, &v) in btw.row_mut(k).iter_mut().zip(w_row) {
                    *o += bik * v;
                }
            }
        }
    }
    let btb = b.matmul_tn(b)?;
    // Column-wise contractions over the rank dimension, accumulated row by row.
    let mut cross = vec![0.0; n];
    for k in 0..r {
        for (c, (&x, &y)) in cross.iter_mut().zip(btw.row(k).iter().zip(a.row(k))) {
            *c += x * y;
        }
    }
    let gram_a = btb.matmul(a)?; // (BᵀB)A, r×n
    let mut quad = vec![0.0; n];
    for k in 0..r {
        for (q, (&x, &y)) in quad.iter_mut().zip(gram_a.row(k).iter().zip(a.row(k))) {
            *q += x * y;
        }
    }
    let norms = (0..n)
        .map(|j| {
            let sq = w_sq[j] + 2.0 * scale * cross[j] + scale * scale * quad[j];
            sq.max(0.0).sqrt()
        })
        .collect();
    Ok(DoraColumns { norms, btw })
}

/// `d_j = m_j / ‖(W_pre + s·BA)_j‖`.
pub fn dora_conditioning_vector(state: &AdapterState, config: &AdapterConfig) -> Result<Vec<f64>> {
    expect_method(config, &[AdapterMethod::Dora], "dora_conditioning_vector")?;
    state.check(config)?;
    let cols = dora_columns(state, config.scale)?;
    check_columns(&cols.norms)?;
    Ok(state
        .diag_vec()
        .iter()
        .zip(&cols.norms)
        .map(|(mag, norm)| mag / norm)
        .collect())
}

/// DoRA as weight conditioning: `W_pre·D + s·B(A·D)`, which equals
/// `W_pre + W_pre(D − I) + s·BA·D` using matrix products only.
pub fn dora_merged_matrix_form(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    let d = dora_conditioning_vector(state, config)?;
    let ad = state.a.diag_right_mul(&d)?.scale(config.scale);
    let (m, n) = state.w_pre.shape();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let row = out.row_mut(i);
        for ((o, &w), &dj) in row.iter_mut().zip(state.w_pre.row(i)).zip(&d) {
            *o = w * dj;
        }
        for (k, &bik) in state.b.row(i).iter().enumerate() {
            if bik != 0.0 {
                for (o, &v) in row.iter_mut().zip(ad.row(k)) {
                    *o += bik * v;
                }
            }
        }
    }
    Ok(out)
}

/// `W_pre·D + s·BA`.
pub fn prediag_merged(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    expect_method(
        config,
        &[AdapterMethod::PreDiag, AdapterMethod::Sora],
        "prediag_merged",
    )?;
    state.check(config)?;
    prediag_unchecked(state, config.scale)
}

fn prediag_unchecked(state: &AdapterState, scale: f64) -> Result<Matrix> {
    let mut out = state.w_pre.diag_right_mul(state.diag_vec())?;
    out.gemm_acc(scale, &state.b, &state.a)?;
    Ok(out)
}

fn check_factors(dp: &Matrix, cp: &Matrix) -> Result<()> {
    if dp.shape() != cp.shape() {
        return Err(Error::DimensionMismatch {
            op: "skew factors",
            lhs: dp.shape(),
            rhs: cp.shape(),
        });
    }
    Ok(())
}

/// `S_P = D_P C_Pᵀ − C_P D_Pᵀ`.
pub fn sora_skew(dp: &Matrix, cp: &Matrix) -> Result<Matrix> {
    check_factors(dp, cp)?;
    let mut s = dp.matmul_nt(cp)?;
    let t = cp.matmul_nt(dp)?;
    s.axpy(-1.0, &t)?;
    Ok(s)
}

/// First-order rotation `P = I + s_P·S_P`.
pub fn sora_rotation(dp: &Matrix, cp: &Matrix, sp: f64) -> Result<Matrix> {
    let mut p = Matrix::identity(dp.rows());
    p.axpy(sp, &sora_skew(dp, cp)?)?;
    Ok(p)
}

/// Resolves `s_P` from the policy. Under the ε policy a zero factor gives
/// `s_P = 1`, which is harmless because `S_P = 0` then.
pub fn resolve_sp(config: &AdapterConfig, dp: &Matrix, cp: &Matrix) -> f64 {
    match config.sp_policy {
        SpPolicy::Fixed(sp) => sp,
        SpPolicy::Epsilon(eps) => epsilon_sp(eps, dp.frobenius_norm(), cp.frobenius_norm()),
    }
}

pub(crate) fn epsilon_sp(eps: f64, dp_norm: f64, cp_norm: f64) -> f64 {
    eps / (2.0 * dp_norm * cp_norm + eps)
}

/// `W·P` by materializing the `n×n` rotation: `O(mn²)`.
pub fn sora_apply_rotation_naive(w: &Matrix, dp: &Matrix, cp: &Matrix, sp: f64) -> Result<Matrix> {
    check_rotation_shapes(w, dp, cp)?;
    w.matmul(&sora_rotation(dp, cp, sp)?)
}

/// `W + s_P·[(W·D_P)·C_Pᵀ − (W·C_P)·D_Pᵀ]`: `O(mn·r_P)`, no `n×n` temporary.
pub fn sora_apply_rotation_reordered(
    w: &Matrix,
    dp: &Matrix,
    cp: &Matrix,
    sp: f64,
) -> Result<Matrix> {
    check_rotation_shapes(w, dp, cp)?;
    let mut out = w.clone();
    rotate_right_acc(&mut out, w, dp, cp, sp)?;
    Ok(out)
}

/// `out += coef·[(W·D_P)·C_Pᵀ − (W·C_P)·D_Pᵀ]`.
pub(crate) fn rotate_right_acc(
    out: &mut Matrix,
    w: &Matrix,
    dp: &Matrix,
    cp: &Matrix,
    coef: f64,
) -> Result<()> {
    if coef == 0.0 {
        return Ok(());
    }
    let wd = w.matmul(dp)?;
    let wc = w.matmul(cp)?;
    out.gemm_acc(coef, &wd, &cp.transpose())?;
    out.gemm_acc(-coef, &wc, &dp.transpose())?;
    Ok(())
}

fn check_rotation_shapes(w: &Matrix, dp: &Matrix, cp: &Matrix) -> Result<()> {
    check_factors(dp, cp)?;
    if w.cols() != dp.rows() {
        return Err(Error::DimensionMismatch {
            op: "rotation",
            lhs: w.shape(),
            rhs: dp.shape(),
        });
    }
    Ok(())
}

/// `(W_pre·D + s·BA)·P` with the reordered rotation.
pub fn sora_merged(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    expect_method(config, &[AdapterMethod::Sora], "sora_merged")?;
    state.check(config)?;
    let (dp, cp) = state.rotation_factors();
    let wpd = prediag_unchecked(state, config.scale)?;
    sora_apply_rotation_reordered(&wpd, dp, cp, resolve_sp(config, dp, cp))
}

/// Pre-Ortho `W_pre·P + s·BA` and Post-Ortho `(W_pre + s·BA)·P`.
pub fn ortho_variant_merged(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    expect_method(
        config,
        &[AdapterMethod::PreOrtho, AdapterMethod::PostOrtho],
        "ortho_variant_merged",
    )?;
    state.check(config)?;
    let (dp, cp) = state.rotation_factors();
    let sp = resolve_sp(config, dp, cp);
    if config.method == AdapterMethod::PreOrtho {
        let mut out = sora_apply_rotation_reordered(&state.w_pre, dp, cp, sp)?;
        out.gemm_acc(config.scale, &state.b, &state.a)?;
        Ok(out)
    } else {
        let v = lora_sum(state, config.scale)?;
        sora_apply_rotation_reordered(&v, dp, cp, sp)
    }
}

/// Single entry point for the merged weight of any method.
pub fn merged_weight(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    match config.method {
        AdapterMethod::Lora => {
            state.check(config)?;
            lora_sum(state, config.scale)
        }
        AdapterMethod::Dora => dora_merged_matrix_form(state, config),
        AdapterMethod::PreDiag => prediag_merged(state, config),
        AdapterMethod::Sora => sora_merged(state, config),
        AdapterMethod::PreOrtho | AdapterMethod::PostOrtho => ortho_variant_merged(state, config),
    }
}

/// `ΔW = W_merged − W_pre`.
pub fn delta_weight(state: &AdapterState, config: &AdapterConfig) -> Result<Matrix> {
    merged_weight(state, config)?.sub(&state.w_pre)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f64,
}

pub fn param_count(config: &AdapterConfig, m: usize, n: usize) -> ParamCount {
    let lora = config.rank * (m + n);
    let rotation = 2 * n * config.rotation_rank;
    let trainable = match config.method {
        AdapterMethod::Lora => lora,
        AdapterMethod::Dora | AdapterMethod::PreDiag => lora + n,
        AdapterMethod::Sora => lora + n + rotation,
        AdapterMethod::PreOrtho | AdapterMethod::PostOrtho => lora + rotation,
    };
    let frozen = m * n;
    ParamCount {
        trainable,
        frozen,
        ratio: trainable as f64 / (trainable + frozen) as f64,
    }
}
