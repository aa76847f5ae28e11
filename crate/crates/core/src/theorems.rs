//! Numerical verifiers for the entropy ordering of step spectra, the
//! Taylor-truncation bound for skew exponentials, and the algebraic
//! identities behind the adapters.
//!
//! Verifiers never abort on a failed check: they count it and keep the
//! offending parameters so a tolerance problem surfaces with diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    dora_conditioning_vector, dora_merged_matrix_form, dora_merged_original, epsilon_sp,
    init_adapter, randomize_trainables, sora_rotation, sora_skew, AdapterConfig, AdapterMethod,
};
use crate::error::{Error, Result};
use crate::linalg::{expm, random_matrix_with, singular_values, Distribution, Matrix};
use crate::spectral::{entropy_of_spectrum_base, weyl_margin};

/// Closed-form and direct entropy gaps must agree to this absolute tolerance.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;
/// Skew inputs may deviate from exact skew-symmetry by this much (Frobenius).
pub const SKEW_TOLERANCE: f64 = 1e-12;
/// Slack added to the Taylor bound for rounding in `expm`.
pub const EXP_BOUND_SLACK: f64 = 1e-12;
/// Resampling budget per Theorem-1 trial.
pub const RESAMPLE_BUDGET: usize = 100;
/// Default tolerances of the identity sweeps.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-12;
pub const WEYL_TOLERANCE: f64 = 1e-9;

fn gauss(std: f64) -> Distribution {
    Distribution::Gaussian { mean: 0.0, std }
}

/// Largest singular value via the SVD. Tighter than power iteration, which
/// matters where a check sits within rounding of its bound.
fn sigma_max(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Parameters of the two step spectra. `gamma` is derived so that
/// `(r−1)α² = (r−1)β² + (s−r)γ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSpectrumParams {
    pub r: usize,
    pub s: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl StepSpectrumParams {
    /// Validates `s > r ≥ 2`, `0 < β < α < 1` and `α > β > γ > 0`.
    pub fn new(r: usize, s: usize, alpha: f64, beta: f64) -> Result<Self> {
        if r < 2 || s <= r {
            return Err(Error::InvalidParameter(format!("need s > r >= 2, got r={r}, s={s}")));
        }
        if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < alpha) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta < alpha < 1, got alpha={alpha}, beta={beta}"
            )));
        }
        let gamma = ((r - 1) as f64 * (alpha * alpha - beta * beta) / (s - r) as f64).sqrt();
        if !(gamma > 0.0 && gamma < beta) {
            return Err(Error::InvalidParameter(format!(
                "gamma={gamma} violates alpha > beta > gamma > 0"
            )));
        }
        Ok(Self { r, s, alpha, beta, gamma })
    }

    /// `E = 1 + (r−1)α²`, the common spectral energy.
    pub fn energy(&self) -> f64 {
        1.0 + (self.r - 1) as f64 * self.alpha * self.alpha
    }

    pub fn lora_spectrum(&self) -> Vec<f64> {
        let mut v = vec![self.alpha; self.r];
        v[0] = 1.0;
        v
    }

    pub fn dora_spectrum(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.s);
        v.push(1.0);
        v.extend(std::iter::repeat_n(self.beta, self.r - 1));
        v.extend(std::iter::repeat_n(self.gamma, self.s - self.r));
        v
    }

    /// `[(r−1)β² log(α²/β²) + (s−r)γ² log(α²/γ²)] / E` in the given base.
    pub fn closed_form_gap(&self, base: f64) -> f64 {
        let (a2, b2, g2) = (self.alpha.powi(2), self.beta.powi(2), self.gamma.powi(2));
        let num = (self.r - 1) as f64 * b2 * (a2 / b2).ln() + (self.s - self.r) as f64 * g2 * (a2 / g2).ln();
        num / self.energy() / base.ln()
    }
}

/// `(1, α, …, α)` of length `r`.
pub fn step_spectrum_lora(r: usize, alpha: f64) -> Result<Vec<f64>> {
    if r < 2 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("need r >= 2 and 0 < alpha < 1, got r={r}, alpha={alpha}")));
    }
    let mut v = vec![alpha; r];
    v[0] = 1.0;
    Ok(v)
}

/// `(1, β×(r−1), γ×(s−r))` and `γ`.
pub fn step_spectrum_dora(r: usize, s: usize, alpha: f64, beta: f64) -> Result<(Vec<f64>, f64)> {
    let p = StepSpectrumParams::new(r, s, alpha, beta)?;
    Ok((p.dora_spectrum(), p.gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Counterexample {
    pub params: StepSpectrumParams,
    pub h_lora: f64,
    pub h_dora: f64,
    pub closed_form_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Record {
    pub trials: usize,
    pub seed: u64,
    pub log_base: f64,
    /// Trials with `H_DoRA > H_LoRA` and closed form within tolerance.
    pub passes: usize,
    pub strict_ordering_failures: usize,
    pub closed_form_failures: usize,
    pub min_gap: f64,
    pub max_closed_form_deviation: f64,
    /// Draws rejected for violating the hypotheses.
    pub rejected_draws: usize,
    /// Trials whose resampling budget ran out; not counted as passes.
    pub exhausted_trials: usize,
    pub counterexamples: Vec<Theorem1Counterexample>,
}

impl Theorem1Record {
    pub fn all_passed(&self) -> bool {
        self.passes == self.trials
    }
}

const MAX_COUNTEREXAMPLES: usize = 16;

fn sample_step_params(rng: &mut ChaCha8Rng, rejected: &mut usize) -> Option<StepSpectrumParams> {
    for _ in 0..RESAMPLE_BUDGET {
        let r = rng.random_range(2..=16);
        let s = rng.random_range(r + 1..=64);
        let alpha = rng.random_range(0.05..0.95);
        let beta = rng.random_range(0.01..alpha * 0.99);
        match StepSpectrumParams::new(r, s, alpha, beta) {
            Ok(p) => return Some(p),
            Err(_) => *rejected += 1,
        }
    }
    None
}

/// Natural-log entropies.
pub fn verify_theorem1(trials: usize, seed: u64) -> Result<Theorem1Record> {
    verify_theorem1_base(trials, seed, std::f64::consts::E)
}

/// Same draws as [`verify_theorem1`]; only the logarithm base changes.
pub fn verify_theorem1_base(trials: usize, seed: u64, base: f64) -> Result<Theorem1Record> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if !(base > 0.0 && base != 1.0 && base.is_finite()) {
        return Err(Error::InvalidParameter(format!("invalid log base {base}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = Theorem1Record {
        trials,
        seed,
        log_base: base,
        passes: 0,
        strict_ordering_failures: 0,
        closed_form_failures: 0,
        min_gap: f64::INFINITY,
        max_closed_form_deviation: 0.0,
        rejected_draws: 0,
        exhausted_trials: 0,
        counterexamples: Vec::new(),
    };
    for _ in 0..trials {
        let Some(p) = sample_step_params(&mut rng, &mut rec.rejected_draws) else {
            rec.exhausted_trials += 1;
            continue;
        };
        let h_lora = entropy_of_spectrum_base(&p.lora_spectrum(), base)?;
        let h_dora = entropy_of_spectrum_base(&p.dora_spectrum(), base)?;
        let gap = h_dora - h_lora;
        let closed = p.closed_form_gap(base);
        let deviation = (gap - closed).abs();
        rec.min_gap = rec.min_gap.min(gap);
        rec.max_closed_form_deviation = rec.max_closed_form_deviation.max(deviation);
        let ordered = gap > 0.0;
        let matches = deviation <= CLOSED_FORM_TOLERANCE;
        rec.strict_ordering_failures += usize::from(!ordered);
        rec.closed_form_failures += usize::from(!matches);
        if ordered && matches {
            rec.passes += 1;
        } else if rec.counterexamples.len() < MAX_COUNTEREXAMPLES {
            rec.counterexamples.push(Theorem1Counterexample { params: p, h_lora, h_dora, closed_form_gap: closed });
        }
    }
    Ok(rec)
}

/// `Σ_{i<k} Jⁱ/i!`: `T₁ = I`, `T₂ = I + J`, ….
pub fn taylor_exp(j: &Matrix, k: usize) -> Result<Matrix> {
    if !j.is_square() {
        return Err(Error::InvalidShape { rows: j.rows(), cols: j.cols(), reason: "taylor_exp needs a square matrix" });
    }
    if k == 0 {
        return Err(Error::InvalidParameter("taylor_exp needs k >= 1".into()));
    }
    let n = j.rows();
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for i in 1..k {
        term = term.matmul(j)?.scale(1.0 / i as f64);
        sum.axpy(1.0, &term)?;
    }
    Ok(sum)
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpBoundCheck {
    /// `‖expm(J) − T_k(J)‖₂`.
    pub error: f64,
    /// `‖J‖₂ᵏ / k!`.
    pub bound: f64,
    pub ok: bool,
}

/// Checks `‖expm(J) − T_k(J)‖₂ ≤ ‖J‖₂ᵏ/k!` (plus [`EXP_BOUND_SLACK`]).
pub fn verify_exp_bound(j: &Matrix, k: usize) -> Result<ExpBoundCheck> {
    let defect = j.skew_defect();
    if !(defect <= SKEW_TOLERANCE) {
        return Err(Error::NotSkew { defect });
    }
    let diff = expm(j)?.sub(&taylor_exp(j, k)?)?;
    let error = sigma_max(&diff)?;
    let bound = sigma_max(j)?.powi(k as i32) / factorial(k);
    Ok(ExpBoundCheck { error, bound, ok: error <= bound + EXP_BOUND_SLACK })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpBoundCounterexample {
    pub n: usize,
    pub k: usize,
    pub check: ExpBoundCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpBoundRecord {
    pub trials: usize,
    pub seed: u64,
    pub orders: Vec<usize>,
    pub checks: usize,
    pub failures: usize,
    /// Largest `error − bound` observed; negative when every check held.
    pub worst_slack: f64,
    pub counterexamples: Vec<ExpBoundCounterexample>,
}

/// Random skew matrix `G − Gᵀ` of random size `2..=max_n`, rescaled so that
/// `‖J‖_F` is uniform in `(0, 2)`.
fn random_skew(rng: &mut ChaCha8Rng, max_n: usize) -> Result<Matrix> {
    let n = rng.random_range(2..=max_n);
    let g = random_matrix_with(n, n, gauss(1.0), rng)?;
    let j = g.sub(&g.transpose())?;
    let target = rng.random_range(0.0..2.0);
    let norm = j.frobenius_norm();
    Ok(if norm > 0.0 { j.scale(target / norm) } else { j })
}

/// Fresh skew draw per trial and order.
pub fn verify_exp_bound_sweep(trials: usize, seed: u64, orders: &[usize]) -> Result<ExpBoundRecord> {
    if trials == 0 || orders.is_empty() || orders.contains(&0) {
        return Err(Error::InvalidParameter("need trials >= 1 and orders >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = ExpBoundRecord {
        trials,
        seed,
        orders: orders.to_vec(),
        checks: 0,
        failures: 0,
        worst_slack: f64::NEG_INFINITY,
        counterexamples: Vec::new(),
    };
    for _ in 0..trials {
        for &k in orders {
            let j = random_skew(&mut rng, 32)?;
            let check = verify_exp_bound(&j, k)?;
            rec.checks += 1;
            rec.worst_slack = rec.worst_slack.max(check.error - check.bound);
            if !check.ok {
                rec.failures += 1;
                if rec.counterexamples.len() < MAX_COUNTEREXAMPLES {
                    rec.counterexamples.push(ExpBoundCounterexample { n: j.rows(), k, check });
                }
            }
        }
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Counterexample {
    pub n: usize,
    pub rotation_rank: usize,
    pub dp_norm: f64,
    pub cp_norm: f64,
    pub sp: f64,
    pub skew_norm: f64,
    pub identity_distance: f64,
    pub second_order_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Record {
    pub trials: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// `‖S_P‖_F ≤ 2‖D_P‖_F‖C_P‖_F`.
    pub skew_norm_passes: usize,
    /// `‖expm(P) − I‖₂ ≤ ε`.
    pub identity_distance_passes: usize,
    /// `‖expm(P) − (I + P)‖₂ ≤ ‖P‖₂²/2`.
    pub second_order_passes: usize,
    /// `s_P ∈ (0, 1)` and `s_P·2‖D_P‖‖C_P‖ ≤ ε`.
    pub sp_passes: usize,
    pub worst_identity_distance: f64,
    /// Largest `lhs − rhs` of each inequality; negative means every trial held.
    pub worst_skew_norm_slack: f64,
    pub worst_identity_slack: f64,
    pub worst_second_order_slack: f64,
    pub counterexamples: Vec<Theorem2Counterexample>,
}

impl Theorem2Record {
    pub fn all_passed(&self) -> bool {
        [self.skew_norm_passes, self.identity_distance_passes, self.second_order_passes, self.sp_passes]
            .iter()
            .all(|&p| p == self.trials)
    }
}

/// Checks on `P = s_P·S_P` for random factors with the ε-policy step size.
pub fn verify_theorem2(trials: usize, epsilon: f64, seed: u64) -> Result<Theorem2Record> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = Theorem2Record {
        trials,
        seed,
        epsilon,
        skew_norm_passes: 0,
        identity_distance_passes: 0,
        second_order_passes: 0,
        sp_passes: 0,
        worst_identity_distance: 0.0,
        worst_skew_norm_slack: f64::NEG_INFINITY,
        worst_identity_slack: f64::NEG_INFINITY,
        worst_second_order_slack: f64::NEG_INFINITY,
        counterexamples: Vec::new(),
    };
    for _ in 0..trials {
        let n = rng.random_range(2..=32);
        let rp = rng.random_range(1..=4usize.min(n));
        // Factor scales spread over several decades.
        let dp_std = 10f64.powf(rng.random_range(-2.0..1.0));
        let cp_std = 10f64.powf(rng.random_range(-2.0..1.0));
        let dp = random_matrix_with(n, rp, gauss(dp_std), &mut rng)?;
        let cp = random_matrix_with(n, rp, gauss(cp_std), &mut rng)?;
        let (dn, cn) = (dp.frobenius_norm(), cp.frobenius_norm());
        let sp = epsilon_sp(epsilon, dn, cn);
        let s = sora_skew(&dp, &cp)?;
        let p = s.scale(sp);
        let e = expm(&p)?;
        let eye = Matrix::identity(n);

        let skew_norm = s.frobenius_norm();
        let skew_slack = skew_norm - 2.0 * dn * cn;
        let identity_distance = sigma_max(&e.sub(&eye)?)?;
        let identity_slack = identity_distance - epsilon;
        let second_order_error = sigma_max(&e.sub(&eye.add(&p)?)?)?;
        let second_order_slack = second_order_error - sigma_max(&p)?.powi(2) / 2.0;

        rec.worst_identity_distance = rec.worst_identity_distance.max(identity_distance);
        rec.worst_skew_norm_slack = rec.worst_skew_norm_slack.max(skew_slack);
        rec.worst_identity_slack = rec.worst_identity_slack.max(identity_slack);
        rec.worst_second_order_slack = rec.worst_second_order_slack.max(second_order_slack);

        // Rounding in the Frobenius norms can exceed an exact-equality bound.
        let skew_ok = skew_slack <= 1e-14 * (2.0 * dn * cn).max(1.0);
        let identity_ok = identity_slack <= 0.0;
        let second_ok = second_order_slack <= EXP_BOUND_SLACK;
        let sp_ok = sp > 0.0 && sp < 1.0 && sp * 2.0 * dn * cn <= epsilon;
        rec.skew_norm_passes += usize::from(skew_ok);
        rec.identity_distance_passes += usize::from(identity_ok);
        rec.second_order_passes += usize::from(second_ok);
        rec.sp_passes += usize::from(sp_ok);
        if !(skew_ok && identity_ok && second_ok && sp_ok) && rec.counterexamples.len() < MAX_COUNTEREXAMPLES {
            rec.counterexamples.push(Theorem2Counterexample {
                n,
                rotation_rank: rp,
                dp_norm: dn,
                cp_norm: cn,
                sp,
                skew_norm,
                identity_distance,
                second_order_error,
            });
        }
    }
    Ok(rec)
}

/// Result of an identity sweep: worst deviation against a tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub check: String,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub failures: usize,
    /// Largest deviation (or, for Weyl, most negative margin negated).
    pub worst: f64,
    /// Trial indices that failed, capped.
    pub failed_trials: Vec<usize>,
}

impl SweepRecord {
    fn new(check: &str, trials: usize, seed: u64, tolerance: f64) -> Self {
        Self { check: check.into(), trials, seed, tolerance, failures: 0, worst: 0.0, failed_trials: Vec::new() }
    }

    fn observe(&mut self, trial: usize, deviation: f64) {
        self.worst = self.worst.max(deviation);
        if !(deviation <= self.tolerance) {
            self.failures += 1;
            if self.failed_trials.len() < MAX_COUNTEREXAMPLES {
                self.failed_trials.push(trial);
            }
        }
    }

    pub fn all_passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random non-trivial DoRA instance with `m, n ≤ max_dim`, `r ≤ max_rank`.
fn random_dora(rng: &mut ChaCha8Rng, max_dim: usize, max_rank: usize) -> Result<(crate::adapters::AdapterState, AdapterConfig)> {
    let m = rng.random_range(2..=max_dim);
    let n = rng.random_range(2..=max_dim);
    let r = rng.random_range(1..=max_rank.min(m).min(n));
    let cfg = AdapterConfig::new(AdapterMethod::Dora, r).with_scale(rng.random_range(0.25..4.0));
    let w = random_matrix_with(m, n, gauss(1.0 / (n as f64).sqrt()), rng)?;
    let mut state = init_adapter(&w, &cfg, rng.random())?;
    randomize_trainables(&mut state, &cfg, 0.5, rng)?;
    Ok((state, cfg))
}

/// Relative Frobenius gap between the column-normalized and the matrix form
/// of DoRA over random instances (`m, n ≤ 128`, `r ≤ 16`).
pub fn verify_dora_equivalence(trials: usize, seed: u64) -> Result<SweepRecord> {
    let mut rec = SweepRecord::new("equivalence", trials, seed, EQUIVALENCE_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let (state, cfg) = random_dora(&mut rng, 128, 16)?;
        let original = dora_merged_original(&state, &cfg)?;
        let matrix_form = dora_merged_matrix_form(&state, &cfg)?;
        rec.observe(t, matrix_form.rel_diff(&original)?);
    }
    Ok(rec)
}

/// Weyl margins `σ₁(W_pre(D−I)) + σ_i(s·BAD) − σ_i(ΔW)`, `i > r`, over random
/// DoRA instances. `worst` is the most negative margin, negated.
pub fn verify_weyl(trials: usize, seed: u64) -> Result<SweepRecord> {
    let mut rec = SweepRecord::new("weyl", trials, seed, WEYL_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rec.worst = f64::NEG_INFINITY;
    for t in 0..trials {
        let (state, cfg) = random_dora(&mut rng, 48, 8)?;
        let d = dora_conditioning_vector(&state, &cfg)?;
        let margins = weyl_margin(&state.w_pre, &d, &state.b, &state.a, cfg.scale, cfg.rank)?;
        let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
        rec.observe(t, if min.is_finite() { -min } else { f64::NEG_INFINITY });
    }
    Ok(rec)
}

/// `‖PᵀP − I‖₂` against `s_P²‖S_P‖₂²` for `P = I + s_P·S_P` with the
/// ε-policy step size, ε log-uniform in `[1e-3, 1]`.
pub fn verify_near_orthogonality(trials: usize, seed: u64) -> Result<SweepRecord> {
    let mut rec = SweepRecord::new("orthogonality", trials, seed, ORTHOGONALITY_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.random_range(2..=32);
        let rp = rng.random_range(1..=4usize.min(n));
        let dp = random_matrix_with(n, rp, gauss(1.0), &mut rng)?;
        let cp = random_matrix_with(n, rp, gauss(1.0), &mut rng)?;
        let eps = 10f64.powf(rng.random_range(-3.0..0.0));
        let sp = epsilon_sp(eps, dp.frobenius_norm(), cp.frobenius_norm());
        let p = sora_rotation(&dp, &cp, sp)?;
        let gram = p.matmul_tn(&p)?.sub(&Matrix::identity(n))?;
        let lhs = sigma_max(&gram)?;
        let rhs = (sp * sigma_max(&sora_skew(&dp, &cp)?)?).powi(2);
        rec.observe(t, (lhs - rhs).abs());
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_step_spectrum() {
        assert_eq!(step_spectrum_lora(2, 0.5).unwrap(), vec![1.0, 0.5]);
        assert_eq!(step_spectrum_lora(4, 0.3).unwrap(), vec![1.0, 0.3, 0.3, 0.3]);
        assert!(step_spectrum_lora(1, 0.5).is_err());
        assert!(step_spectrum_lora(3, 1.0).is_err());
        let h = entropy_of_spectrum_base(&step_spectrum_lora(5, 0.999999).unwrap(), std::f64::consts::E).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn dora_step_spectrum_worked_instance() {
        let (spec, gamma) = step_spectrum_dora(2, 3, 0.5, 0.4).unwrap();
        assert!((gamma - 0.3).abs() < 1e-15);
        assert_eq!(spec.len(), 3);
        assert!((spec[2] - 0.3).abs() < 1e-15);
        assert!(step_spectrum_dora(2, 3, 0.4, 0.5).is_err());
        assert!(step_spectrum_dora(3, 3, 0.5, 0.4).is_err());
        // γ ≥ β: (r−1)(α²−β²)/(s−r) = 0.24 > 0.01.
        assert!(step_spectrum_dora(2, 3, 0.5, 0.1).is_err());
    }

    #[test]
    fn energy_constraint_holds() {
        let p = StepSpectrumParams::new(5, 40, 0.7, 0.6).unwrap();
        let lhs = 4.0 * 0.49;
        let rhs = 4.0 * 0.36 + 35.0 * p.gamma * p.gamma;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn converging_spectra_as_beta_approaches_alpha() {
        let e = std::f64::consts::E;
        let p = StepSpectrumParams::new(3, 4, 0.5, 0.5 - 1e-9).unwrap();
        let gap = entropy_of_spectrum_base(&p.dora_spectrum(), e).unwrap()
            - entropy_of_spectrum_base(&p.lora_spectrum(), e).unwrap();
        assert!(gap > 0.0 && gap < 1e-6, "{gap}");
    }

    #[test]
    fn closed_form_matches_worked_gap() {
        let p = StepSpectrumParams::new(2, 3, 0.5, 0.4).unwrap();
        let direct = -(0.8f64 * 0.8f64.ln() + 0.128 * 0.128f64.ln() + 0.072 * 0.072f64.ln())
            + (0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((p.closed_form_gap(std::f64::consts::E) - direct).abs() < 1e-14);
    }

    #[test]
    fn theorem1_small_sweep_and_base_invariance() {
        let nats = verify_theorem1(500, 3).unwrap();
        let bits = verify_theorem1_base(500, 3, 2.0).unwrap();
        assert!(nats.all_passed() && bits.all_passed());
        assert_eq!(nats.passes, bits.passes);
        assert_eq!(nats.rejected_draws, bits.rejected_draws);
        assert!((nats.min_gap / 2f64.ln() - bits.min_gap).abs() < 1e-12);
        assert!(verify_theorem1(0, 1).is_err());
    }

    #[test]
    fn taylor_partial_sums() {
        let j = Matrix::from_rows(&[&[0.0, -0.3], &[0.3, 0.0]]);
        assert_eq!(taylor_exp(&j, 1).unwrap(), Matrix::identity(2));
        assert_eq!(taylor_exp(&j, 2).unwrap(), Matrix::identity(2).add(&j).unwrap());
        let long = taylor_exp(&j, 30).unwrap();
        assert!(long.max_abs_diff(&expm(&j).unwrap()).unwrap() <= 1e-12);
        assert!(taylor_exp(&Matrix::zeros(2, 3), 2).is_err());
        assert!(taylor_exp(&j, 0).is_err());
    }

    #[test]
    fn exp_bound_two_by_two_rotation() {
        let theta: f64 = 0.1;
        let j = Matrix::from_rows(&[&[0.0, -theta], &[theta, 0.0]]);
        let check = verify_exp_bound(&j, 2).unwrap();
        let closed = ((theta.cos() - 1.0).powi(2) + (theta.sin() - theta).powi(2)).sqrt();
        assert!((check.error - closed).abs() < 1e-15);
        assert!((check.error - 4.9986e-3).abs() < 1e-7);
        assert!((check.bound - 5e-3).abs() < 1e-15);
        assert!(check.ok);

        let zero = verify_exp_bound(&Matrix::zeros(3, 3), 2).unwrap();
        assert_eq!((zero.error, zero.bound), (0.0, 0.0));
        assert!(matches!(verify_exp_bound(&Matrix::identity(2), 2), Err(Error::NotSkew { .. })));
    }

    #[test]
    fn exp_bound_sweep_small() {
        let rec = verify_exp_bound_sweep(100, 5, &[1, 2, 3]).unwrap();
        assert_eq!(rec.checks, 300);
        assert_eq!(rec.failures, 0, "{:?}", rec.counterexamples);
    }

    #[test]
    fn theorem2_small_and_zero_factor() {
        for eps in [1e-1, 1e-2, 1e-3] {
            let rec = verify_theorem2(100, eps, 9).unwrap();
            assert!(rec.all_passed(), "{rec:?}");
            assert!(rec.worst_identity_distance <= eps);
        }
        let dp = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let cp = Matrix::zeros(2, 1);
        let s = sora_skew(&dp, &cp).unwrap();
        assert_eq!(s.frobenius_norm(), 0.0);
        assert_eq!(expm(&s).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn identity_sweeps_small() {
        assert!(verify_dora_equivalence(10, 1).unwrap().all_passed());
        assert!(verify_weyl(10, 2).unwrap().all_passed());
        let orth = verify_near_orthogonality(50, 3).unwrap();
        assert!(orth.all_passed(), "{orth:?}");
    }
}
