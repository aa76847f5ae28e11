//! `wcond`: spectral analysis of checkpoint pairs, synthetic training runs,
//! numerical verifiers and timing benches.
//!
//! Exit codes: 0 success, 1 I/O, pre-check or assertion failure, 2 only
//! degenerate input, 3 divergence, 64 usage.

mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use wcond::adapters::{AdapterConfig, AdapterMethod, SpPolicy};
use wcond::bench::{
    bench_dora_forms, bench_rotation_reorder, bench_train_step, BenchResult, PairedBench, TrainStepKind,
};
use wcond::io::{delta_pairs, load_manifest, write_matrix, LayerEntry, Manifest};
use wcond::spectral::{aggregate_reports, layer_report, SpectralReport};
use wcond::theorems::{
    verify_dora_equivalence, verify_exp_bound_sweep, verify_theorem1, verify_theorem1_base,
    verify_theorem2, verify_weyl, SweepRecord,
};
use wcond::train::{run_experiment, Optimizer, TaskSpec, TeacherPerturbation, TrainConfig};
use wcond::Error;

use report::{csv_field, with_suffix, write_outputs, Csv, RunReport};

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_DEGENERATE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "wcond", version, about = "Weight-conditioning adapter lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spectral metrics of ΔW for every layer pair in a manifest.
    Analyze(AnalyzeArgs),
    /// Train an adapter on the synthetic teacher–student task.
    Train(TrainArgs),
    /// Run a numerical verifier.
    Verify(VerifyArgs),
    /// Run a paired timing benchmark.
    Bench(BenchArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct Output {
    /// Output stem; writes `<stem>.json` and `<stem>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Format printed to stdout.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    method: AdapterMethod,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    rank: u32,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    rotation_rank: u32,
    /// Low-rank scale `s`.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    /// ε policy for the rotation step size.
    #[arg(long, conflicts_with = "sp")]
    epsilon: Option<f64>,
    /// Fixed rotation step size.
    #[arg(long)]
    sp: Option<f64>,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 400, value_parser = clap::value_parser!(u32).range(1..))]
    steps: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    batch: u32,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    samples: u32,
    #[arg(long, default_value_t = 2)]
    teacher_rank: u32,
    #[arg(long, default_value_t = 1.0)]
    teacher_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    diag_spread: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Verifier {
    Theorem1,
    Theorem2,
    Expbound,
    Weyl,
    Equivalence,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(value_enum)]
    which: Verifier,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u32).range(1..))]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// ε values for theorem2.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    epsilon: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BenchKind {
    RotationReorder,
    DoraForms,
    TrainStep,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(value_enum)]
    which: BenchKind,
    #[arg(long, default_value_t = 1024, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, default_value_t = 1024, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    rank: u32,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    rotation_rank: u32,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(10..))]
    repeats: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

fn parse_method(s: &str) -> Result<AdapterMethod, String> {
    s.parse::<AdapterMethod>().map_err(|e| e.to_string())
}

/// A finished command: report body, CSV mirror, seeds and exit code.
struct Outcome {
    results: Value,
    csv: Csv,
    seeds: Vec<u64>,
    code: u8,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let start = Instant::now();
    let (name, output, result) = match &cli.command {
        Command::Analyze(a) => ("analyze", &a.output, cmd_analyze(a)),
        Command::Train(a) => ("train", &a.output, cmd_train(a)),
        Command::Verify(a) => ("verify", &a.output, cmd_verify(a)),
        Command::Bench(a) => ("bench", &a.output, cmd_bench(a)),
    };
    let outcome = match result {
        Ok(o) => o,
        Err((code, msg)) => {
            eprintln!("wcond {name}: {msg}");
            return ExitCode::from(code);
        }
    };
    let report = RunReport {
        command: std::env::args().collect(),
        seeds: outcome.seeds,
        results: outcome.results,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    match write_outputs(output.out.as_deref(), output.format, &report, &outcome.csv) {
        Ok(()) => ExitCode::from(outcome.code),
        Err(e) => {
            eprintln!("wcond {name}: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

type CmdResult = Result<Outcome, (u8, String)>;

fn fail(e: Error) -> (u8, String) {
    let code = match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    };
    (code, e.to_string())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn cmd_analyze(args: &AnalyzeArgs) -> CmdResult {
    let loaded = load_manifest(&args.manifest).map_err(fail)?;
    let pairs = delta_pairs(&loaded).map_err(fail)?;
    for name in &pairs.skipped {
        eprintln!("note: layer '{name}' has no after_path, skipped");
    }
    let reports: Vec<SpectralReport> = pairs
        .deltas
        .iter()
        .map(|(name, dw)| layer_report(name, dw))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let aggregate = aggregate_reports(&reports);

    let mut csv = Csv::new(&["layer", "stable_rank", "svd_entropy_nats", "sigma_max", "num_sv"]);
    for r in &reports {
        csv.row(vec![
            csv_field(&r.layer_name),
            opt(r.stable_rank),
            opt(r.svd_entropy_nats),
            r.sigma_max.to_string(),
            r.num_singular_values.to_string(),
        ]);
    }
    let all_degenerate = reports.iter().all(|r| r.degenerate);
    if all_degenerate {
        eprintln!("all {} layers have a zero update", reports.len());
    }
    Ok(Outcome {
        results: json!({ "layers": reports, "aggregate": aggregate, "skipped": pairs.skipped }),
        csv,
        seeds: Vec::new(),
        code: if all_degenerate { EXIT_DEGENERATE } else { EXIT_OK },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let usage = |msg: String| (EXIT_USAGE, msg);
    let sp_policy = match (args.epsilon, args.sp) {
        (Some(e), _) if !(e > 0.0) => return Err(usage(format!("--epsilon must be positive, got {e}"))),
        (Some(e), _) => SpPolicy::Epsilon(e),
        (None, Some(sp)) => SpPolicy::Fixed(sp),
        (None, None) => SpPolicy::default(),
    };
    let adapter = AdapterConfig::new(args.method, args.rank as usize)
        .with_scale(args.scale)
        .with_rotation_rank(args.rotation_rank as usize)
        .with_sp_policy(sp_policy);
    adapter.validate(args.m as usize, args.n as usize).map_err(|e| usage(e.to_string()))?;
    let optimizer = match args.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd { lr: args.lr },
        OptimizerKind::Adam => Optimizer::adam(args.lr),
    };
    if !(args.lr > 0.0) {
        return Err(usage(format!("--lr must be positive, got {}", args.lr)));
    }
    let task = TaskSpec {
        m: args.m as usize,
        n: args.n as usize,
        num_samples: args.samples as usize,
        teacher: TeacherPerturbation {
            lowrank_rank: args.teacher_rank as usize,
            lowrank_scale: args.teacher_scale,
            diag_scale_spread: args.diag_spread,
        },
        noise_sigma: args.noise,
        seed: 0,
    };

    let mut csv = Csv::new(&[
        "seed",
        "method",
        "initial_loss",
        "final_loss",
        "stable_rank",
        "svd_entropy_nats",
        "numerical_rank",
        "resolved_sp",
    ]);
    let mut runs = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &args.seeds {
        let train = TrainConfig { optimizer, steps: args.steps as usize, batch: args.batch as usize, seed };
        let run = run_experiment(&task.with_seed(seed), &adapter, &train).map_err(|e| {
            let (code, msg) = fail(e);
            (code, format!("seed {seed}: {msg}"))
        })?;
        let summary = run.summary();
        csv.row(vec![
            seed.to_string(),
            args.method.name().to_string(),
            summary.initial_loss.to_string(),
            summary.final_loss.to_string(),
            opt(summary.stable_rank),
            opt(summary.svd_entropy_nats),
            summary.numerical_rank.to_string(),
            opt(summary.resolved_sp),
        ]);
        artifacts.push((seed, run.final_state.w_pre.clone(), run.final_delta.clone()));
        runs.push(json!({ "summary": summary, "spectral": run.spectral, "loss_trajectory": run.loss_trajectory }));
    }
    // Matrices are written only once every seed has finished.
    if let Some(stem) = &args.output.out {
        let mut layers = Vec::new();
        for (seed, w_pre, delta) in &artifacts {
            let paths = [
                with_suffix(stem, &format!("_seed{seed}_delta.mtx")),
                with_suffix(stem, &format!("_seed{seed}_before.mtx")),
                with_suffix(stem, &format!("_seed{seed}_after.mtx")),
            ];
            write_matrix(&paths[0], delta).map_err(fail)?;
            write_matrix(&paths[1], w_pre).map_err(fail)?;
            write_matrix(&paths[2], &w_pre.add(delta).map_err(fail)?).map_err(fail)?;
            let file = |p: &PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
            layers.push(LayerEntry {
                name: format!("seed{seed}"),
                before_path: file(&paths[1]),
                after_path: Some(file(&paths[2])),
            });
        }
        let mut manifest = Manifest { layers, ..Default::default() };
        manifest.metadata.insert("method".into(), args.method.name().into());
        manifest.save(with_suffix(stem, "_manifest.json")).map_err(fail)?;
    }
    Ok(Outcome {
        results: json!({ "task": task, "adapter": adapter, "runs": runs }),
        csv,
        seeds: args.seeds.clone(),
        code: EXIT_OK,
    })
}

fn sweep_row(csv: &mut Csv, rec: &SweepRecord) {
    csv.row(vec![
        rec.check.clone(),
        String::new(),
        rec.trials.to_string(),
        (rec.trials - rec.failures).to_string(),
        rec.worst.to_string(),
    ]);
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let trials = args.trials as usize;
    let seed = args.seed;
    let mut csv = Csv::new(&["check", "parameter", "trials", "passes", "worst"]);
    let (results, ok) = match args.which {
        Verifier::Theorem1 => {
            let nats = verify_theorem1(trials, seed).map_err(fail)?;
            let bits = verify_theorem1_base(trials, seed, 2.0).map_err(fail)?;
            let base_invariant = nats.passes == bits.passes
                && nats.strict_ordering_failures == bits.strict_ordering_failures;
            for rec in [&nats, &bits] {
                csv.row(vec![
                    "theorem1".into(),
                    format!("base={}", rec.log_base),
                    rec.trials.to_string(),
                    rec.passes.to_string(),
                    rec.min_gap.to_string(),
                ]);
            }
            let ok = nats.all_passed() && bits.all_passed() && base_invariant;
            (json!({ "nats": nats, "bits": bits, "base_invariant": base_invariant }), ok)
        }
        Verifier::Theorem2 => {
            if args.epsilon.iter().any(|e| !(*e > 0.0)) {
                return Err((EXIT_USAGE, "--epsilon values must be positive".into()));
            }
            let mut recs = Vec::new();
            let mut ok = true;
            for (i, &eps) in args.epsilon.iter().enumerate() {
                let rec = verify_theorem2(trials, eps, seed.wrapping_add(i as u64)).map_err(fail)?;
                ok &= rec.all_passed();
                let passes = [rec.skew_norm_passes, rec.identity_distance_passes, rec.second_order_passes, rec.sp_passes]
                    .into_iter()
                    .min()
                    .unwrap();
                csv.row(vec![
                    "theorem2".into(),
                    format!("epsilon={eps}"),
                    rec.trials.to_string(),
                    passes.to_string(),
                    rec.worst_identity_distance.to_string(),
                ]);
                recs.push(rec);
            }
            (json!({ "buckets": recs }), ok)
        }
        Verifier::Expbound => {
            let rec = verify_exp_bound_sweep(trials, seed, &[1, 2, 3]).map_err(fail)?;
            csv.row(vec![
                "expbound".into(),
                "k=1,2,3".into(),
                rec.checks.to_string(),
                (rec.checks - rec.failures).to_string(),
                rec.worst_slack.to_string(),
            ]);
            let ok = rec.failures == 0;
            (to_value(&rec), ok)
        }
        Verifier::Weyl => {
            let rec = verify_weyl(trials, seed).map_err(fail)?;
            sweep_row(&mut csv, &rec);
            (to_value(&rec), rec.all_passed())
        }
        Verifier::Equivalence => {
            let rec = verify_dora_equivalence(trials, seed).map_err(fail)?;
            sweep_row(&mut csv, &rec);
            (to_value(&rec), rec.all_passed())
        }
    };
    if !ok {
        eprintln!("verification failed; see report for counterexamples");
    }
    Ok(Outcome { results, csv, seeds: vec![seed], code: if ok { EXIT_OK } else { EXIT_FAILURE } })
}

fn bench_row(csv: &mut Csv, r: &BenchResult) {
    csv.row(vec![
        r.name.clone(),
        r.sizes.m.to_string(),
        r.sizes.n.to_string(),
        r.sizes.r.to_string(),
        r.sizes.r_p.to_string(),
        r.repeats.to_string(),
        r.warmup.to_string(),
        r.median_ns.to_string(),
        r.p10_ns.to_string(),
        r.p90_ns.to_string(),
        opt(r.speedup_vs_baseline),
    ]);
}

fn paired_outcome(csv: &mut Csv, pair: &PairedBench, assertion: Option<(&str, bool)>) -> (Value, Vec<(String, bool)>) {
    bench_row(csv, &pair.baseline);
    bench_row(csv, &pair.candidate);
    let checks: Vec<(String, bool)> = assertion.into_iter().map(|(n, ok)| (n.to_string(), ok)).collect();
    (json!({ "pair": pair }), checks)
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    let (m, n) = (args.m as usize, args.n as usize);
    let (r, rp) = (args.rank as usize, args.rotation_rank as usize);
    let repeats = args.repeats as usize;
    let mut csv = Csv::new(&[
        "name", "m", "n", "r", "r_p", "repeats", "warmup", "median_ns", "p10_ns", "p90_ns", "speedup",
    ]);
    let (body, checks) = match args.which {
        BenchKind::RotationReorder => {
            let pair = bench_rotation_reorder(m, n, rp, repeats, args.seed).map_err(fail)?;
            let gated = m >= 1024 && n >= 1024 && rp == 1;
            paired_outcome(&mut csv, &pair, gated.then_some(("reordered >= 3x naive", pair.speedup >= 3.0)))
        }
        BenchKind::DoraForms => {
            let pair = bench_dora_forms(m, n, r, repeats, args.seed).map_err(fail)?;
            let gated = m >= 2048 && n >= 2048;
            paired_outcome(&mut csv, &pair, gated.then_some(("matrix form faster", pair.speedup > 1.0)))
        }
        BenchKind::TrainStep => {
            let report = bench_train_step(&TrainStepKind::ALL, m, n, r, rp, repeats, args.seed).map_err(fail)?;
            for res in &report.results {
                bench_row(&mut csv, res);
            }
            let checks = if m >= 1024 && n >= 1024 { report.orderings() } else { Vec::new() };
            (json!({ "train_step": report }), checks)
        }
    };
    let ok = checks.iter().all(|(_, ok)| *ok);
    for (name, passed) in &checks {
        if !passed {
            eprintln!("assertion failed: {name}");
        }
    }
    let assertions: Vec<Value> = checks.iter().map(|(n, ok)| json!({ "check": n, "passed": ok })).collect();
    let mut results = body;
    results["assertions"] = Value::Array(assertions);
    Ok(Outcome { results, csv, seeds: vec![args.seed], code: if ok { EXIT_OK } else { EXIT_FAILURE } })
}
