//! Teacher–student training harness.
//!
//! A student layer starts from `W_pre` and is fit to a perturbed teacher
//! `W* = (W_pre + L)·Diag(c)` under ½·MSE, where `L` is low rank and `c` a
//! column rescale. Gradients are analytic for every method and run in
//! activation form (the merged `m×n` weight is never formed on the hot
//! path); [`fd_grad`] provides the central-difference oracle.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    dora_columns, dora_merged_original, epsilon_sp, init_adapter, merged_weight, delta_weight,
    resolve_sp, AdapterConfig, AdapterMethod, AdapterState, SpPolicy, DEGENERATE_COLUMN_NORM,
};
use crate::error::{Error, Result};
use crate::linalg::{random_matrix_with, Distribution, Matrix};
use crate::spectral::{layer_report, median, SpectralReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherPerturbation {
    pub lowrank_rank: usize,
    pub lowrank_scale: f64,
    /// Column rescale factors are drawn from `1 ± diag_scale_spread`.
    pub diag_scale_spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub m: usize,
    pub n: usize,
    pub num_samples: usize,
    pub teacher: TeacherPerturbation,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// 64×64 layer, rank-2 subspace perturbation and a ±0.3 column rescale.
    pub fn standard(seed: u64) -> Self {
        Self {
            m: 64,
            n: 64,
            num_samples: 256,
            teacher: TeacherPerturbation {
                lowrank_rank: 2,
                lowrank_scale: 1.0,
                diag_scale_spread: 0.3,
            },
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A materialized task: frozen weights, teacher, and the sample set
/// (`x` is `n × num_samples`, one sample per column).
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    pub w_pre: Matrix,
    pub w_teacher: Matrix,
    pub x: Matrix,
    pub y: Matrix,
}

pub fn build_task(spec: &TaskSpec) -> Result<Task> {
    let TaskSpec { m, n, num_samples, teacher, noise_sigma, seed } = *spec;
    if m == 0 || n == 0 || num_samples == 0 {
        return Err(Error::InvalidParameter("task dimensions must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && teacher.diag_scale_spread >= 0.0 && teacher.lowrank_scale >= 0.0) {
        return Err(Error::InvalidParameter(
            "noise, spread and low-rank scale must be non-negative".into(),
        ));
    }
    let gauss = |std: f64| Distribution::Gaussian { mean: 0.0, std };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_pre = random_matrix_with(m, n, gauss(1.0 / (n as f64).sqrt()), &mut rng)?;

    let mut w_teacher = w_pre.clone();
    if teacher.lowrank_rank > 0 && teacher.lowrank_scale > 0.0 {
        let k = teacher.lowrank_rank;
        let u = random_matrix_with(m, k, gauss(1.0 / (m as f64).sqrt()), &mut rng)?;
        let v = random_matrix_with(n, k, gauss(1.0 / (n as f64).sqrt()), &mut rng)?;
        w_teacher.axpy(teacher.lowrank_scale, &u.matmul_nt(&v)?)?;
    }
    if teacher.diag_scale_spread > 0.0 {
        let c: Vec<f64> = (0..n)
            .map(|_| 1.0 + teacher.diag_scale_spread * rng.random_range(-1.0..=1.0))
            .collect();
        w_teacher = w_teacher.diag_right_mul(&c)?;
    }

    let x = random_matrix_with(n, num_samples, gauss(1.0), &mut rng)?;
    let mut y = w_teacher.matmul(&x)?;
    if noise_sigma > 0.0 {
        y.axpy(1.0, &random_matrix_with(m, num_samples, gauss(noise_sigma), &mut rng)?)?;
    }
    Ok(Task { spec: *spec, w_pre, w_teacher, x, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam at 1e-2 for 400 steps of 64 samples.
    pub fn standard(seed: u64) -> Self {
        Self { optimizer: Optimizer::adam(1e-2), steps: 400, batch: 64, seed }
    }

    fn validate(&self) -> Result<()> {
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("steps and batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Names of the trainable tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    A,
    B,
    Diag,
    Dp,
    Cp,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::A => "A",
            ParamKind::B => "B",
            ParamKind::Diag => "diag",
            ParamKind::Dp => "D_P",
            ParamKind::Cp => "C_P",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

pub fn trainable_params(method: AdapterMethod) -> &'static [ParamKind] {
    use ParamKind::*;
    match method {
        AdapterMethod::Lora => &[A, B],
        AdapterMethod::Dora | AdapterMethod::PreDiag => &[A, B, Diag],
        AdapterMethod::Sora => &[A, B, Diag, Dp, Cp],
        AdapterMethod::PreOrtho | AdapterMethod::PostOrtho => &[A, B, Dp, Cp],
    }
}

impl AdapterState {
    pub fn param(&self, kind: ParamKind) -> Option<&[f64]> {
        match kind {
            ParamKind::A => Some(self.a.data()),
            ParamKind::B => Some(self.b.data()),
            ParamKind::Diag => self.diag.as_deref(),
            ParamKind::Dp => self.dp.as_ref().map(Matrix::data),
            ParamKind::Cp => self.cp.as_ref().map(Matrix::data),
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut [f64]> {
        match kind {
            ParamKind::A => Some(self.a.data_mut()),
            ParamKind::B => Some(self.b.data_mut()),
            ParamKind::Diag => self.diag.as_deref_mut(),
            ParamKind::Dp => self.dp.as_mut().map(Matrix::data_mut),
            ParamKind::Cp => self.cp.as_mut().map(Matrix::data_mut),
        }
    }
}

/// Loss gradient for every trainable tensor of a method.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub a: Matrix,
    pub b: Matrix,
    pub diag: Option<Vec<f64>>,
    pub dp: Option<Matrix>,
    pub cp: Option<Matrix>,
}

impl Gradients {
    fn zeros_like(state: &AdapterState) -> Self {
        Self {
            a: Matrix::zeros(state.a.rows(), state.a.cols()),
            b: Matrix::zeros(state.b.rows(), state.b.cols()),
            diag: state.diag.as_ref().map(|d| vec![0.0; d.len()]),
            dp: state.dp.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            cp: state.cp.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    pub fn get(&self, kind: ParamKind) -> Option<&[f64]> {
        match kind {
            ParamKind::A => Some(self.a.data()),
            ParamKind::B => Some(self.b.data()),
            ParamKind::Diag => self.diag.as_deref(),
            ParamKind::Dp => self.dp.as_ref().map(Matrix::data),
            ParamKind::Cp => self.cp.as_ref().map(Matrix::data),
        }
    }

    fn get_mut(&mut self, kind: ParamKind) -> Option<&mut [f64]> {
        match kind {
            ParamKind::A => Some(self.a.data_mut()),
            ParamKind::B => Some(self.b.data_mut()),
            ParamKind::Diag => self.diag.as_deref_mut(),
            ParamKind::Dp => self.dp.as_mut().map(Matrix::data_mut),
            ParamKind::Cp => self.cp.as_mut().map(Matrix::data_mut),
        }
    }

    /// Per-tensor relative error `‖g − h‖ / max(‖g‖, ‖h‖, floor)` against
    /// another gradient record, over the tensors both carry.
    pub fn relative_errors(&self, other: &Gradients, floor: f64) -> Vec<(ParamKind, f64)> {
        [ParamKind::A, ParamKind::B, ParamKind::Diag, ParamKind::Dp, ParamKind::Cp]
            .into_iter()
            .filter_map(|kind| {
                let (g, h) = (self.get(kind)?, other.get(kind)?);
                let diff = g.iter().zip(h).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                Some((kind, diff / gn.max(hn).max(floor)))
            })
            .collect()
    }
}

/// Intermediate activations of the factored forward pass
/// `y = W_pre·base_in + s·B·(A·lr_in)`.
struct ForwardParts {
    y: Matrix,
    base_in: Matrix,
    lr_in: Matrix,
    a_lr: Matrix,
    /// `P·x` for rotation-bearing methods.
    rotated: Option<Matrix>,
    sp: Option<f64>,
    dora: Option<DoraForward>,
}

struct DoraForward {
    norms: Vec<f64>,
    btw: Matrix,
}

/// `P·x = x + s_P·(D_P(C_Pᵀx) − C_P(D_Pᵀx))`.
fn rotate_input(x: &Matrix, dp: &Matrix, cp: &Matrix, sp: f64) -> Result<Matrix> {
    let mut z = x.clone();
    let cx = cp.matmul_tn(x)?;
    let dx = dp.matmul_tn(x)?;
    z.gemm_acc(sp, dp, &cx)?;
    z.gemm_acc(-sp, cp, &dx)?;
    Ok(z)
}

fn forward_parts(state: &AdapterState, config: &AdapterConfig, x: &Matrix) -> Result<ForwardParts> {
    state.check(config)?;
    if x.rows() != state.in_dim() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            lhs: state.w_pre.shape(),
            rhs: x.shape(),
        });
    }
    let (rotated, sp) = if config.method.has_rotation() {
        let (dp, cp) = (state.dp.as_ref().unwrap(), state.cp.as_ref().unwrap());
        let sp = resolve_sp(config, dp, cp);
        (Some(rotate_input(x, dp, cp, sp)?), Some(sp))
    } else {
        (None, None)
    };
    let mut dora = None;
    let (base_in, lr_in) = match config.method {
        AdapterMethod::Lora => (x.clone(), x.clone()),
        AdapterMethod::Dora => {
            let cols = dora_columns(state, config.scale)?;
            for (column, &norm) in cols.norms.iter().enumerate() {
                if !(norm >= DEGENERATE_COLUMN_NORM) {
                    return Err(Error::DegenerateColumn { column, norm });
                }
            }
            let d: Vec<f64> = state
                .diag
                .as_ref()
                .unwrap()
                .iter()
                .zip(&cols.norms)
                .map(|(mag, norm)| mag / norm)
                .collect();
            let u = x.diag_left_mul(&d)?;
            dora = Some(DoraForward { norms: cols.norms, btw: cols.btw });
            (u.clone(), u)
        }
        AdapterMethod::PreDiag => (x.diag_left_mul(state.diag.as_ref().unwrap())?, x.clone()),
        AdapterMethod::Sora => {
            let z = rotated.as_ref().unwrap();
            (z.diag_left_mul(state.diag.as_ref().unwrap())?, z.clone())
        }
        AdapterMethod::PreOrtho => (rotated.clone().unwrap(), x.clone()),
        AdapterMethod::PostOrtho => {
            let z = rotated.clone().unwrap();
            (z.clone(), z)
        }
    };
    let a_lr = state.a.matmul(&lr_in)?;
    let mut y = state.w_pre.matmul(&base_in)?;
    y.gemm_acc(config.scale, &state.b, &a_lr)?;
    Ok(ForwardParts { y, base_in, lr_in, a_lr, rotated, sp, dora })
}

/// `W_merged · x`, evaluated through the factors.
pub fn forward(state: &AdapterState, config: &AdapterConfig, x: &Matrix) -> Result<Matrix> {
    Ok(forward_parts(state, config, x)?.y)
}

/// `½·‖y_pred − y_true‖_F² / (number of entries)`.
pub fn loss(y_pred: &Matrix, y_true: &Matrix) -> Result<f64> {
    let diff = y_pred.sub(y_true)?;
    let n = diff.data().len() as f64;
    Ok(0.5 * diff.data().iter().map(|v| v * v).sum::<f64>() / n)
}

pub fn grad_params(
    state: &AdapterState,
    config: &AdapterConfig,
    x: &Matrix,
    y_true: &Matrix,
) -> Result<Gradients> {
    Ok(loss_and_grad(state, config, x, y_true)?.1)
}

/// Loss and its analytic gradient from one forward pass.
pub fn loss_and_grad(
    state: &AdapterState,
    config: &AdapterConfig,
    x: &Matrix,
    y_true: &Matrix,
) -> Result<(f64, Gradients)> {
    let fwd = forward_parts(state, config, x)?;
    let value = loss(&fwd.y, y_true)?;
    let mut upstream = fwd.y.sub(y_true)?;
    upstream.scale_in_place(1.0 / upstream.data().len() as f64);

    let s = config.scale;
    let mut grads = Gradients::zeros_like(state);
    let btr = state.b.matmul_tn(&upstream)?;
    grads.a = btr.matmul_nt(&fwd.lr_in)?.scale(s);
    grads.b = upstream.matmul_nt(&fwd.a_lr)?.scale(s);
    if config.method == AdapterMethod::Lora {
        return Ok((value, grads));
    }

    // Gradient w.r.t. the low-rank branch input and the base branch input.
    let lr_bar = state.a.matmul_tn(&btr)?.scale(s);
    let base_bar = state.w_pre.matmul_tn(&upstream)?;

    match config.method {
        AdapterMethod::Lora => unreachable!(),
        AdapterMethod::PreDiag => {
            grads.diag = Some(row_dots(&base_bar, x));
        }
        AdapterMethod::Dora => {
            let dora = fwd.dora.as_ref().unwrap();
            let mag = state.diag.as_ref().unwrap();
            let mut u_bar = base_bar;
            u_bar.axpy(1.0, &lr_bar)?;
            let g = row_dots(&u_bar, x);
            grads.diag = Some(g.iter().zip(&dora.norms).map(|(g, n)| g / n).collect());
            // d_j = mag_j / N_j, so ∂L/∂V_j picks up (∂L/∂N_j / N_j)·V_j.
            let c: Vec<f64> = g
                .iter()
                .zip(mag)
                .zip(&dora.norms)
                .map(|((g, mag), n)| -g * mag / (n * n * n))
                .collect();
            // ∂A += s·BᵀV·Diag(c), BᵀV = BᵀW + s·(BᵀB)A
            let mut btv = dora.btw.clone();
            btv.gemm_acc(s, &state.b.matmul_tn(&state.b)?, &state.a)?;
            grads.a.axpy(s, &btv.diag_right_mul(&c)?)?;
            // ∂B += s·V·Diag(c)·Aᵀ = s·[W(Diag(c)Aᵀ) + s·B(A·Diag(c)Aᵀ)]
            let ac_t = state.a.diag_right_mul(&c)?.transpose();
            let mut vca = state.w_pre.matmul(&ac_t)?;
            vca.gemm_acc(s, &state.b, &state.a.matmul(&ac_t)?)?;
            grads.b.axpy(s, &vca)?;
        }
        AdapterMethod::Sora | AdapterMethod::PreOrtho | AdapterMethod::PostOrtho => {
            let z = fwd.rotated.as_ref().unwrap();
            let z_bar = match config.method {
                AdapterMethod::Sora => {
                    let d = state.diag.as_ref().unwrap();
                    grads.diag = Some(row_dots(&base_bar, z));
                    let mut zb = base_bar.diag_left_mul(d)?;
                    zb.axpy(1.0, &lr_bar)?;
                    zb
                }
                AdapterMethod::PreOrtho => base_bar,
                _ => {
                    let mut zb = base_bar;
                    zb.axpy(1.0, &lr_bar)?;
                    zb
                }
            };
            rotation_backward(state, config, fwd.sp.unwrap(), x, &z_bar, &mut grads)?;
        }
    }
    let _ = &fwd.base_in;
    Ok((value, grads))
}

/// `Σ_b a[j, b]·x[j, b]` for every row `j`.
fn row_dots(a: &Matrix, x: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|j| a.row(j).iter().zip(x.row(j)).map(|(p, q)| p * q).sum())
        .collect()
}

/// Back-propagates `∂L/∂z` through `z = x + s_P(D_P C_Pᵀ − C_P D_Pᵀ)x`,
/// including the dependence of `s_P` on the factor norms under the ε policy.
fn rotation_backward(
    state: &AdapterState,
    config: &AdapterConfig,
    sp: f64,
    x: &Matrix,
    z_bar: &Matrix,
    grads: &mut Gradients,
) -> Result<()> {
    let (dp, cp) = (state.dp.as_ref().unwrap(), state.cp.as_ref().unwrap());
    let cx = cp.matmul_tn(x)?;
    let dx = dp.matmul_tn(x)?;
    let cz = cp.matmul_tn(z_bar)?;
    let dz = dp.matmul_tn(z_bar)?;

    let mut g_dp = z_bar.matmul_nt(&cx)?;
    g_dp.axpy(-1.0, &x.matmul_nt(&cz)?)?;
    g_dp.scale_in_place(sp);
    let mut g_cp = x.matmul_nt(&dz)?;
    g_cp.axpy(-1.0, &z_bar.matmul_nt(&dx)?)?;
    g_cp.scale_in_place(sp);

    if let SpPolicy::Epsilon(eps) = config.sp_policy {
        let sp_bar = dz.frobenius_dot(&cx)? - cz.frobenius_dot(&dx)?;
        let (dn, cn) = (dp.frobenius_norm(), cp.frobenius_norm());
        let denom = 2.0 * dn * cn + eps;
        debug_assert!((epsilon_sp(eps, dn, cn) - sp).abs() <= 1e-15);
        let dsp_ddn = -2.0 * eps * cn / (denom * denom);
        let dsp_dcn = -2.0 * eps * dn / (denom * denom);
        if dn > 0.0 {
            g_dp.axpy(sp_bar * dsp_ddn / dn, dp)?;
        }
        if cn > 0.0 {
            g_cp.axpy(sp_bar * dsp_dcn / cn, cp)?;
        }
    }
    grads.dp = Some(g_dp);
    grads.cp = Some(g_cp);
    Ok(())
}

/// DoRA gradient through the materialized column-normalized weight, the
/// way the original formulation is usually trained. Shares no code with
/// [`grad_params`] beyond the kernels, so the two cross-check each other.
pub fn grad_params_dora_columnwise(
    state: &AdapterState,
    config: &AdapterConfig,
    x: &Matrix,
    y_true: &Matrix,
) -> Result<(f64, Gradients)> {
    let merged = dora_merged_original(state, config)?;
    let y = merged.matmul(x)?;
    let value = loss(&y, y_true)?;
    let mut upstream = y.sub(y_true)?;
    upstream.scale_in_place(1.0 / upstream.data().len() as f64);
    let g = upstream.matmul_nt(x)?;

    let s = config.scale;
    let mut v = state.w_pre.clone();
    v.gemm_acc(s, &state.b, &state.a)?;
    let norms = v.column_norms();
    let mag = state.diag.as_ref().unwrap();
    let n = v.cols();
    let mut vg = vec![0.0; n];
    for i in 0..v.rows() {
        for ((acc, vv), gg) in vg.iter_mut().zip(v.row(i)).zip(g.row(i)) {
            *acc += vv * gg;
        }
    }
    let d: Vec<f64> = mag.iter().zip(&norms).map(|(m, n)| m / n).collect();
    let proj: Vec<f64> = (0..n).map(|j| -mag[j] * vg[j] / norms[j].powi(3)).collect();
    let mut g_v = g.diag_right_mul(&d)?;
    g_v.axpy(1.0, &v.diag_right_mul(&proj)?)?;

    let mut grads = Gradients::zeros_like(state);
    grads.diag = Some((0..n).map(|j| vg[j] / norms[j]).collect());
    grads.a = state.b.matmul_tn(&g_v)?.scale(s);
    grads.b = g_v.matmul_nt(&state.a)?.scale(s);
    Ok((value, grads))
}

/// Central differences `(L(θ+h) − L(θ−h)) / 2h` on every trainable scalar.
/// Losses come from the dense merged weight, independent of the factored
/// forward pass used by [`grad_params`].
pub fn fd_grad(
    state: &AdapterState,
    config: &AdapterConfig,
    x: &Matrix,
    y_true: &Matrix,
    h: f64,
) -> Result<Gradients> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let dense_loss = |s: &AdapterState| -> Result<f64> {
        loss(&merged_weight(s, config)?.matmul(x)?, y_true)
    };
    let mut grads = Gradients::zeros_like(state);
    let mut probe = state.clone();
    for &kind in trainable_params(config.method) {
        let len = state.param(kind).map_or(0, <[f64]>::len);
        for i in 0..len {
            let orig = state.param(kind).unwrap()[i];
            probe.param_mut(kind).unwrap()[i] = orig + h;
            let plus = dense_loss(&probe)?;
            probe.param_mut(kind).unwrap()[i] = orig - h;
            let minus = dense_loss(&probe)?;
            probe.param_mut(kind).unwrap()[i] = orig;
            grads.get_mut(kind).unwrap()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Optimizer hyperparameters plus Adam moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    pub step: u64,
    moments: [Option<(Vec<f64>, Vec<f64>)>; 5],
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Self {
        Self { optimizer, step: 0, moments: Default::default() }
    }
}

/// One update of every trainable tensor present in `grads`. `W_pre` is
/// never touched.
pub fn optimizer_step(
    state: &mut AdapterState,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step as i32;
    for kind in [ParamKind::A, ParamKind::B, ParamKind::Diag, ParamKind::Dp, ParamKind::Cp] {
        let Some(g) = grads.get(kind) else { continue };
        let theta = state.param_mut(kind).ok_or_else(|| Error::StateMismatch {
            method: "optimizer",
            reason: format!("gradient for {} but no such tensor", kind.name()),
        })?;
        if theta.len() != g.len() {
            return Err(Error::DimensionMismatch {
                op: "optimizer_step",
                lhs: (theta.len(), 1),
                rhs: (g.len(), 1),
            });
        }
        match opt.optimizer {
            Optimizer::Sgd { lr } => {
                for (p, gi) in theta.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let (m, v) = opt.moments[kind.slot()]
                    .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, gi), mi), vi) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Outcome of one synthetic fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub task: TaskSpec,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    /// Mini-batch loss before each step; length `steps`.
    pub loss_trajectory: Vec<f64>,
    /// Full-sample loss at initialization and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_state: AdapterState,
    pub final_delta: Matrix,
    pub spectral: SpectralReport,
    /// Rotation step size of the final state, for rotation-bearing methods.
    pub resolved_sp: Option<f64>,
}

/// Serializable digest of a [`TrainRun`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: AdapterMethod,
    pub task_seed: u64,
    pub train_seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stable_rank: Option<f64>,
    pub svd_entropy_nats: Option<f64>,
    pub numerical_rank: usize,
    pub resolved_sp: Option<f64>,
}

impl TrainRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.adapter.method,
            task_seed: self.task.seed,
            train_seed: self.train.seed,
            steps: self.train.steps,
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
            stable_rank: self.spectral.stable_rank,
            svd_entropy_nats: self.spectral.svd_entropy_nats,
            numerical_rank: self.spectral.numerical_rank,
            resolved_sp: self.resolved_sp,
        }
    }
}

fn select_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), idx.len());
    for i in 0..m.rows() {
        let src = m.row(i);
        for (dst, &j) in out.row_mut(i).iter_mut().zip(idx) {
            *dst = src[j];
        }
    }
    out
}

/// Trains one adapter on one task. Deterministic for fixed seeds.
pub fn run_experiment(task: &TaskSpec, adapter: &AdapterConfig, train: &TrainConfig) -> Result<TrainRun> {
    train.validate()?;
    let data = build_task(task)?;
    let mut state = init_adapter(&data.w_pre, adapter, train.seed)?;
    let mut opt = OptimizerState::new(train.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7261_696e);
    let full = train.batch >= task.num_samples;

    let initial_loss = loss(&forward(&state, adapter, &data.x)?, &data.y)?;
    let mut loss_trajectory = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let (value, grads) = if full {
            loss_and_grad(&state, adapter, &data.x, &data.y)?
        } else {
            let idx = sample(&mut rng, task.num_samples, train.batch).into_vec();
            let xb = select_columns(&data.x, &idx);
            let yb = select_columns(&data.y, &idx);
            loss_and_grad(&state, adapter, &xb, &yb)?
        };
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        loss_trajectory.push(value);
        optimizer_step(&mut state, &grads, &mut opt)?;
    }
    let final_loss = loss(&forward(&state, adapter, &data.x)?, &data.y)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: train.steps, loss: final_loss });
    }
    let final_delta = delta_weight(&state, adapter)?;
    let spectral = layer_report(adapter.method.name(), &final_delta)?;
    let resolved_sp = match (&state.dp, &state.cp) {
        (Some(dp), Some(cp)) => Some(resolve_sp(adapter, dp, cp)),
        _ => None,
    };
    Ok(TrainRun {
        task: *task,
        adapter: *adapter,
        train: *train,
        loss_trajectory,
        initial_loss,
        final_loss,
        final_state: state,
        final_delta,
        spectral,
        resolved_sp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: AdapterMethod,
    pub median_entropy: f64,
    pub median_stable_rank: f64,
    pub median_final_loss: f64,
    /// Per-seed values in seed order; `NaN` for a zero update.
    pub entropies: Vec<f64>,
    pub stable_ranks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOrdering {
    pub higher: AdapterMethod,
    pub lower: AdapterMethod,
    /// Median entropy of `higher` strictly exceeds that of `lower`.
    pub median_greater: bool,
    /// Fraction of seeds on which `higher` has strictly greater entropy.
    pub seed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodComparison>,
    pub orderings: Vec<PairOrdering>,
}

impl ComparisonRecord {
    pub fn method(&self, method: AdapterMethod) -> Option<&MethodComparison> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn ordering(&self, higher: AdapterMethod, lower: AdapterMethod) -> Option<&PairOrdering> {
        self.orderings.iter().find(|o| o.higher == higher && o.lower == lower)
    }
}

/// Trains every adapter on the same task for each seed (task, init and
/// batching all use that seed) and compares final-update entropies.
pub fn entropy_comparison_suite(
    task: &TaskSpec,
    adapters: &[AdapterConfig],
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<ComparisonRecord> {
    if seeds.is_empty() || adapters.is_empty() {
        return Err(Error::InvalidParameter("need at least one seed and one method".into()));
    }
    let mut methods = Vec::with_capacity(adapters.len());
    for adapter in adapters {
        let mut entropies = Vec::with_capacity(seeds.len());
        let mut ranks = Vec::with_capacity(seeds.len());
        let mut losses = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = run_experiment(&task.with_seed(seed), adapter, &TrainConfig { seed, ..*train })?;
            entropies.push(run.spectral.svd_entropy_nats.unwrap_or(f64::NAN));
            ranks.push(run.spectral.stable_rank.unwrap_or(f64::NAN));
            losses.push(run.final_loss);
        }
        let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).collect::<Vec<_>>();
        methods.push(MethodComparison {
            method: adapter.method,
            median_entropy: median(&finite(&entropies)),
            median_stable_rank: median(&finite(&ranks)),
            median_final_loss: median(&losses),
            entropies,
            stable_ranks: ranks,
        });
    }
    let mut orderings = Vec::new();
    for hi in &methods {
        for lo in &methods {
            if hi.method == lo.method {
                continue;
            }
            let wins = hi
                .entropies
                .iter()
                .zip(&lo.entropies)
                .filter(|(a, b)| a > b)
                .count();
            orderings.push(PairOrdering {
                higher: hi.method,
                lower: lo.method,
                median_greater: hi.median_entropy > lo.median_entropy,
                seed_fraction: wins as f64 / seeds.len() as f64,
            });
        }
    }
    Ok(ComparisonRecord { seeds: seeds.to_vec(), methods, orderings })
}
