//! Paired timing harnesses.
//!
//! Every pair is checked for numerical equality on the exact benchmark
//! inputs before any timing. Paired paths are timed interleaved (one call
//! of each per repeat, order alternating) so drift affects both equally.
//! Single-threaded by construction.

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    dora_merged_matrix_form, dora_merged_original, init_adapter, randomize_trainables,
    sora_apply_rotation_naive, sora_apply_rotation_reordered, AdapterConfig, AdapterMethod,
    AdapterState,
};
use crate::error::{Error, Result};
use crate::linalg::{random_matrix_with, Distribution, Matrix};
use crate::train::{grad_params_dora_columnwise, loss_and_grad, optimizer_step, Gradients, Optimizer, OptimizerState};

pub const MIN_WARMUP: usize = 3;
pub const MIN_REPEATS: usize = 10;
/// Paired outputs must agree to this relative Frobenius error before timing.
pub const PRECHECK_TOLERANCE: f64 = 1e-12;
/// Samples per step in the training-step benchmark.
pub const TRAIN_STEP_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSizes {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub r_p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub name: String,
    pub sizes: BenchSizes,
    pub repeats: usize,
    pub warmup: usize,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    /// `baseline median / this median`, for the candidate of a pair.
    pub speedup_vs_baseline: Option<f64>,
}

impl BenchResult {
    fn from_samples(name: &str, sizes: BenchSizes, warmup: usize, mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        Self {
            name: name.to_string(),
            sizes,
            repeats: samples.len(),
            warmup,
            median_ns: percentile(&samples, 0.5),
            p10_ns: percentile(&samples, 0.1),
            p90_ns: percentile(&samples, 0.9),
            speedup_vs_baseline: None,
        }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedBench {
    pub baseline: BenchResult,
    pub candidate: BenchResult,
    /// Relative Frobenius difference of the two outputs on the timed inputs.
    pub precheck_deviation: f64,
    pub speedup: f64,
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidParameter(format!("repeats must be at least {MIN_REPEATS}, got {repeats}")));
    }
    Ok(())
}

fn time_ns<T>(f: &mut impl FnMut() -> T) -> u64 {
    let start = Instant::now();
    black_box(f());
    start.elapsed().as_nanos() as u64
}

/// Round-robin timing of several closures; the starting closure rotates
/// every repeat.
fn time_interleaved<T>(fns: &mut [&mut dyn FnMut() -> T], warmup: usize, repeats: usize) -> Vec<Vec<u64>> {
    let k = fns.len();
    for _ in 0..warmup {
        for f in fns.iter_mut() {
            black_box(f());
        }
    }
    let mut samples = vec![Vec::with_capacity(repeats); k];
    for rep in 0..repeats {
        for off in 0..k {
            let i = (rep + off) % k;
            samples[i].push(time_ns(&mut fns[i]));
        }
    }
    samples
}

fn paired(
    sizes: BenchSizes,
    repeats: usize,
    names: (&str, &str),
    precheck_deviation: f64,
    mut baseline: impl FnMut() -> Matrix,
    mut candidate: impl FnMut() -> Matrix,
) -> PairedBench {
    let mut samples = time_interleaved::<Matrix>(&mut [&mut baseline, &mut candidate], MIN_WARMUP, repeats);
    let cand = BenchResult::from_samples(names.1, sizes, MIN_WARMUP, samples.pop().unwrap());
    let base = BenchResult::from_samples(names.0, sizes, MIN_WARMUP, samples.pop().unwrap());
    let speedup = base.median_ns as f64 / cand.median_ns.max(1) as f64;
    PairedBench {
        baseline: base,
        candidate: BenchResult { speedup_vs_baseline: Some(speedup), ..cand },
        precheck_deviation,
        speedup,
    }
}

fn precheck(bench: &'static str, a: &Matrix, b: &Matrix) -> Result<f64> {
    let deviation = b.rel_diff(a)?;
    if !(deviation <= PRECHECK_TOLERANCE) {
        return Err(Error::PrecheckFailed { bench, deviation });
    }
    Ok(deviation)
}

fn random_state(method: AdapterMethod, sizes: BenchSizes, seed: u64) -> Result<(AdapterState, AdapterConfig)> {
    let cfg = AdapterConfig::new(method, sizes.r).with_rotation_rank(sizes.r_p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_matrix_with(
        sizes.m,
        sizes.n,
        Distribution::Gaussian { mean: 0.0, std: 1.0 / (sizes.n as f64).sqrt() },
        &mut rng,
    )?;
    let mut state = init_adapter(&w, &cfg, seed)?;
    randomize_trainables(&mut state, &cfg, 0.5, &mut rng)?;
    Ok((state, cfg))
}

/// Column-normalized DoRA (baseline) against the matrix form (candidate).
pub fn bench_dora_forms(m: usize, n: usize, r: usize, repeats: usize, seed: u64) -> Result<PairedBench> {
    check_repeats(repeats)?;
    let sizes = BenchSizes { m, n, r, r_p: 0 };
    let (state, cfg) = random_state(AdapterMethod::Dora, sizes, seed)?;
    let dev = precheck(
        "dora-forms",
        &dora_merged_original(&state, &cfg)?,
        &dora_merged_matrix_form(&state, &cfg)?,
    )?;
    Ok(paired(
        sizes,
        repeats,
        ("dora_original", "dora_matrix_form"),
        dev,
        || dora_merged_original(black_box(&state), &cfg).unwrap(),
        || dora_merged_matrix_form(black_box(&state), &cfg).unwrap(),
    ))
}

/// `W·P` with materialized `P` (baseline) against the reordered product.
pub fn bench_rotation_reorder(m: usize, n: usize, r_p: usize, repeats: usize, seed: u64) -> Result<PairedBench> {
    check_repeats(repeats)?;
    if r_p == 0 || r_p > n {
        return Err(Error::InvalidParameter(format!("need 1 <= r_p <= n, got r_p={r_p}")));
    }
    let sizes = BenchSizes { m, n, r: 0, r_p };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Distribution::Gaussian { mean: 0.0, std: 1.0 };
    let w = random_matrix_with(m, n, gauss, &mut rng)?;
    let dp = random_matrix_with(n, r_p, gauss, &mut rng)?;
    let cp = random_matrix_with(n, r_p, gauss, &mut rng)?;
    let sp = 0.01;
    let dev = precheck(
        "rotation-reorder",
        &sora_apply_rotation_naive(&w, &dp, &cp, sp)?,
        &sora_apply_rotation_reordered(&w, &dp, &cp, sp)?,
    )?;
    Ok(paired(
        sizes,
        repeats,
        ("rotation_naive", "rotation_reordered"),
        dev,
        || sora_apply_rotation_naive(black_box(&w), &dp, &cp, sp).unwrap(),
        || sora_apply_rotation_reordered(black_box(&w), &dp, &cp, sp).unwrap(),
    ))
}

/// Trainers compared in the training-step benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStepKind {
    Lora,
    /// DoRA trained through the matrix form (factored gradient).
    Dora,
    /// DoRA trained through the materialized column-normalized weight.
    DoraOriginal,
    PreDiag,
    Sora,
}

impl TrainStepKind {
    pub const ALL: [TrainStepKind; 5] = [
        TrainStepKind::Lora,
        TrainStepKind::Dora,
        TrainStepKind::DoraOriginal,
        TrainStepKind::PreDiag,
        TrainStepKind::Sora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainStepKind::Lora => "lora",
            TrainStepKind::Dora => "dora",
            TrainStepKind::DoraOriginal => "dora_original",
            TrainStepKind::PreDiag => "prediag",
            TrainStepKind::Sora => "sora",
        }
    }

    fn method(self) -> AdapterMethod {
        match self {
            TrainStepKind::Lora => AdapterMethod::Lora,
            TrainStepKind::Dora | TrainStepKind::DoraOriginal => AdapterMethod::Dora,
            TrainStepKind::PreDiag => AdapterMethod::PreDiag,
            TrainStepKind::Sora => AdapterMethod::Sora,
        }
    }
}

struct StepInstance {
    kind: TrainStepKind,
    state: AdapterState,
    cfg: AdapterConfig,
    opt: OptimizerState,
}

impl StepInstance {
    fn grads(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Gradients)> {
        match self.kind {
            TrainStepKind::DoraOriginal => grad_params_dora_columnwise(&self.state, &self.cfg, x, y),
            _ => loss_and_grad(&self.state, &self.cfg, x, y),
        }
    }

    /// Gradient plus a plain SGD update.
    fn step(&mut self, x: &Matrix, y: &Matrix) -> f64 {
        let (loss, g) = self.grads(x, y).unwrap();
        optimizer_step(&mut self.state, &g, &mut self.opt).unwrap();
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub sizes: BenchSizes,
    pub batch: usize,
    pub results: Vec<BenchResult>,
}

impl TrainStepReport {
    pub fn median(&self, kind: TrainStepKind) -> Option<u64> {
        self.results.iter().find(|r| r.name == kind.name()).map(|r| r.median_ns)
    }

    /// Ordinal claims: PreDiag faster than DoRA, SORA faster than the
    /// column-normalized DoRA trainer, LoRA fastest of all.
    pub fn orderings(&self) -> Vec<(String, bool)> {
        let med = |k| self.median(k).unwrap_or(u64::MAX);
        let lora = med(TrainStepKind::Lora);
        let lora_fastest = self
            .results
            .iter()
            .filter(|r| r.name != TrainStepKind::Lora.name())
            .all(|r| lora < r.median_ns);
        vec![
            ("prediag < dora".into(), med(TrainStepKind::PreDiag) < med(TrainStepKind::Dora)),
            ("sora < dora_original".into(), med(TrainStepKind::Sora) < med(TrainStepKind::DoraOriginal)),
            ("lora fastest".into(), lora_fastest),
        ]
    }
}

/// Per-step cost (gradient + SGD update) of each trainer on one shared
/// layer and batch. DoRA and DoRA-original share their starting state, and
/// their gradients are checked to agree before timing.
pub fn bench_train_step(
    kinds: &[TrainStepKind],
    m: usize,
    n: usize,
    r: usize,
    r_p: usize,
    repeats: usize,
    seed: u64,
) -> Result<TrainStepReport> {
    check_repeats(repeats)?;
    if kinds.is_empty() {
        return Err(Error::InvalidParameter("no trainers selected".into()));
    }
    let sizes = BenchSizes { m, n, r, r_p };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let gauss = Distribution::Gaussian { mean: 0.0, std: 1.0 };
    let x = random_matrix_with(n, TRAIN_STEP_BATCH, gauss, &mut rng)?;
    let y = random_matrix_with(m, TRAIN_STEP_BATCH, gauss, &mut rng)?;

    let mut instances = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (state, cfg) = random_state(kind.method(), sizes, seed)?;
        instances.push(StepInstance { kind, state, cfg, opt: OptimizerState::new(Optimizer::Sgd { lr: 1e-6 }) });
    }
    if let (Some(a), Some(b)) = (
        instances.iter().find(|i| i.kind == TrainStepKind::Dora),
        instances.iter().find(|i| i.kind == TrainStepKind::DoraOriginal),
    ) {
        let (_, ga) = a.grads(&x, &y)?;
        let (_, gb) = b.grads(&x, &y)?;
        let deviation = ga.relative_errors(&gb, 1e-300).into_iter().map(|(_, e)| e).fold(0.0, f64::max);
        if !(deviation <= 1e-10) {
            return Err(Error::PrecheckFailed { bench: "train-step", deviation });
        }
    }

    let mut closures: Vec<Box<dyn FnMut() -> f64 + '_>> = instances
        .iter_mut()
        .map(|inst| {
            let (x, y) = (&x, &y);
            Box::new(move || inst.step(black_box(x), y)) as Box<dyn FnMut() -> f64>
        })
        .collect();
    let mut refs: Vec<&mut dyn FnMut() -> f64> = closures.iter_mut().map(|c| c.as_mut() as &mut dyn FnMut() -> f64).collect();
    let samples = time_interleaved(&mut refs, MIN_WARMUP, repeats);
    let results = kinds
        .iter()
        .zip(samples)
        .map(|(k, s)| BenchResult::from_samples(k.name(), sizes, MIN_WARMUP, s))
        .collect();
    Ok(TrainStepReport { sizes, batch: TRAIN_STEP_BATCH, results })
}

/// Median speedups of the reordered rotation over a range of widths.
pub fn rotation_speedup_sweep(ns: &[usize], r_p: usize, repeats: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    ns.iter()
        .map(|&n| Ok((n, bench_rotation_reorder(n, n, r_p, repeats, seed)?.speedup)))
        .collect()
}

/// Non-decreasing within a relative noise band: each value is at least
/// `(1 − band)` times the running maximum.
pub fn is_monotone_within(values: &[f64], band: f64) -> bool {
    let mut best = f64::NEG_INFINITY;
    values.iter().all(|&v| {
        let ok = v >= best * (1.0 - band);
        best = best.max(v);
        ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile(&s, 0.5), 5);
        assert_eq!(percentile(&s, 0.1), 1);
        assert_eq!(percentile(&s, 0.9), 9);
        assert_eq!(percentile(&[7], 0.9), 7);
    }

    #[test]
    fn result_ordering_invariant() {
        let r = BenchResult::from_samples("x", BenchSizes { m: 1, n: 1, r: 1, r_p: 1 }, 3, vec![30, 10, 20, 50, 40, 60, 80, 70, 90, 100]);
        assert!(r.p10_ns <= r.median_ns && r.median_ns <= r.p90_ns);
        assert_eq!(r.repeats, 10);
    }

    #[test]
    fn repeats_floor() {
        assert!(bench_rotation_reorder(8, 8, 1, 5, 0).is_err());
        assert!(bench_dora_forms(8, 8, 2, 9, 0).is_err());
    }

    #[test]
    fn small_pairs_run() {
        let p = bench_rotation_reorder(16, 16, 2, 10, 1).unwrap();
        assert!(p.precheck_deviation <= PRECHECK_TOLERANCE);
        assert_eq!(p.candidate.speedup_vs_baseline, Some(p.speedup));
        let d = bench_dora_forms(16, 12, 3, 10, 1).unwrap();
        assert!(d.precheck_deviation <= PRECHECK_TOLERANCE);
        let t = bench_train_step(&TrainStepKind::ALL, 16, 12, 2, 1, 10, 1).unwrap();
        assert_eq!(t.results.len(), 5);
    }

    #[test]
    fn monotone_band() {
        assert!(is_monotone_within(&[1.0, 2.0, 1.9, 3.0], 0.1));
        assert!(!is_monotone_within(&[1.0, 2.0, 1.7], 0.1));
    }
}
