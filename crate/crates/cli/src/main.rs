//! `pvr` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or audit failure,
//! 3 numeric or training failure, 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvr_core::dshift::{
    gen_adversarial_test, gen_train_holdout, holdout_set, perm_list, verify_disjoint, visual_split_plan,
    HoldoutManifest, HoldoutSpec, PositionalHoldoutRule, SplitPhase,
};
use pvr_core::noise::{log_uniform_grid, ns_sweep, sweep_summary, write_sweep_csv, NsConfig};
use pvr_core::rng::{derive_seed, GENERATOR_ID};
use pvr_core::taskgen::{export_csv, generate_with, read_pvr, write_pvr, ShiftTag};
use pvr_core::trainer::{train, ExperimentConfig, NamedDataset};
use pvr_core::visualgen::{compose, read_idx, synthetic_bank, write_composed, write_idx_bank, Style};
use pvr_core::{oracle, Aggregation, Error, TaskSpec};

const USAGE: u8 = 1;
const VALIDATION: u8 = 2;
const NUMERIC: u8 = 3;
const IO: u8 = 4;

/// Seed offset separating a holdout experiment's test set from its train set.
const TEST_SEED_DOMAIN: u64 = 0x7e57;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(msg: impl ToString) -> Self {
        Self {
            code: USAGE,
            message: msg.to_string(),
        }
    }

    fn validation(msg: impl ToString) -> Self {
        Self {
            code: VALIDATION,
            message: msg.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidComplexity { .. }
            | Error::InvalidPointer { .. }
            | Error::InvalidVocab(_)
            | Error::UnknownAggregation(_)
            | Error::InvalidArgument(_)
            | Error::HoldoutOutOfRange { .. }
            | Error::BudgetExceeded(_) => USAGE,
            Error::NumericFailure { .. } | Error::OutOfCapacity(_) => NUMERIC,
            Error::Io(_) | Error::Csv(_) => IO,
            _ => VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: IO,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::validation(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "pvr",
    version,
    about = "Pointer value retrieval datasets, shifts, noise sensitivity and training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an iid vectorized dataset.
    Gen(GenArgs),
    /// Generate a permutation-holdout train set and its adversarial test set.
    Holdout(HoldoutArgs),
    /// Sweep noise sensitivity over aggregations, complexities and deltas.
    Ns(NsArgs),
    /// Relabel a dataset with the reference oracle and check holdout windows.
    Audit(AuditArgs),
    /// Print the exact label distribution over pointers x window contents.
    Oracle(OracleArgs),
    /// Train the reference MLP from a JSON experiment config.
    Train(TrainArgs),
    /// Compose a visual dataset from an IDX digit bank.
    Visual(VisualArgs),
    /// Write a procedurally drawn IDX digit bank.
    SynthBank(SynthBankArgs),
}

#[derive(Args, Debug)]
struct TaskArgs {
    /// Complexity (window size minus one).
    #[arg(long)]
    m: usize,
    /// Aggregation: mod_sum, median, maj_vote, min, max.
    #[arg(long, default_value = "mod_sum")]
    agg: String,
    /// Vocabulary size.
    #[arg(long, default_value_t = 10)]
    vocab: u8,
}

impl TaskArgs {
    fn spec(&self) -> CliResult<TaskSpec> {
        let agg: Aggregation = self.agg.parse().map_err(CliError::usage)?;
        TaskSpec::with_vocab(self.vocab, self.m, agg).map_err(CliError::usage)
    }
}

#[derive(Args, Debug)]
struct WorkerArgs {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, env = "PVR_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PVR1 file.
    #[arg(long)]
    out: PathBuf,
    /// Also export CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Tag the file as a dshift test set instead of iid.
    #[arg(long)]
    dshift_test: bool,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args, Debug)]
struct HoldoutArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Hold out the first i lexicographic permutations of (0..m).
    #[arg(long, conflicts_with = "all_perms", required_unless_present = "all_perms")]
    i: Option<usize>,
    /// Hold out all (m+1)! permutations.
    #[arg(long)]
    all_perms: bool,
    /// Training examples.
    #[arg(long)]
    n: usize,
    /// Adversarial test examples (defaults to n).
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
    /// Manifest path (defaults to <out-train>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args, Debug)]
struct NsArgs {
    /// Comma-separated aggregations.
    #[arg(long, default_value = "mod_sum,median,maj_vote,min,max")]
    aggs: String,
    /// Inclusive complexity range, `lo-hi` or a single value.
    #[arg(long, default_value = "0-4")]
    m_range: String,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Number of log-uniform delta points on [e^delta_lo, e^delta_hi].
    #[arg(long, default_value_t = 50)]
    grid: usize,
    #[arg(long, default_value_t = -7.0, allow_negative_numbers = true)]
    delta_lo: f64,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    delta_hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional plain-text average-NS summary.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    holdout_manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json and epochs.csv (overrides the config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VisualArgs {
    /// block or sequential.
    #[arg(long)]
    style: String,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// iid, train, dshift-test or holdout-test (block style only for shifts).
    #[arg(long, default_value = "iid")]
    plan: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args, Debug)]
struct SynthBankArgs {
    #[arg(long, default_value_t = 60_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

fn run_gen(a: GenArgs) -> CliResult {
    let spec = a.task.spec()?;
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let shift = if a.dshift_test {
        ShiftTag::DshiftTest
    } else {
        ShiftTag::Iid
    };
    let ds = generate_with(&spec, a.n, a.seed, shift, a.workers.workers)?;
    write_pvr(&ds, &a.out)?;
    if let Some(csv) = &a.csv {
        export_csv(&ds, csv)?;
    }
    println!("wrote {} examples to {}", ds.len(), a.out.display());
    Ok(())
}

fn run_holdout(a: HoldoutArgs) -> CliResult {
    let spec = a.task.spec()?;
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let i = match (a.i, a.all_perms) {
        (_, true) => perm_list(spec.complexity)?.len(),
        (Some(i), false) => i,
        (None, false) => return Err(CliError::usage("one of --i or --all-perms is required")),
    };
    let hs = holdout_set(spec.complexity, i)?;
    let workers = a.workers.workers;
    let n_test = a.n_test.unwrap_or(a.n);
    let test_seed = derive_seed(a.seed, &[TEST_SEED_DOMAIN]);
    let train_ds = gen_train_holdout(&spec, &hs, a.n, a.seed, workers)?;
    let test_ds = gen_adversarial_test(&spec, n_test, test_seed, workers)?;
    let report = verify_disjoint(&train_ds, &hs)?;
    if !report.is_clean() {
        return Err(CliError::validation(format!(
            "{} heldout windows in training set",
            report.violations.len()
        )));
    }
    write_pvr(&train_ds, &a.out_train)?;
    write_pvr(&test_ds, &a.out_test)?;
    let manifest = HoldoutManifest {
        spec,
        holdout: hs,
        seed: a.seed,
        train_file: file_name(&a.out_train),
        train_count: train_ds.len(),
        test_file: file_name(&a.out_test),
        test_count: test_ds.len(),
        generator: GENERATOR_ID.to_string(),
    };
    let path = a
        .manifest
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", a.out_train.display())));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!(
        "{}: {} train / {} adversarial test examples, manifest {}",
        manifest.holdout.tag,
        manifest.train_count,
        manifest.test_count,
        path.display()
    );
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_m_range(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::usage(format!("bad --m-range `{s}`"));
    let (lo, hi) = match s.split_once(['-', ':']) {
        Some((lo, hi)) => (
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let v: usize = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(bad());
    }
    Ok((lo..=hi).collect())
}

fn run_ns(a: NsArgs) -> CliResult {
    if a.samples == 0 || a.runs == 0 || a.grid == 0 {
        return Err(CliError::usage("--samples, --runs and --grid must be positive"));
    }
    let mut specs = Vec::new();
    for name in a.aggs.split(',').filter(|s| !s.is_empty()) {
        let agg: Aggregation = name.trim().parse().map_err(CliError::usage)?;
        for m in parse_m_range(&a.m_range)? {
            specs.push(TaskSpec::new(m, agg).map_err(CliError::usage)?);
        }
    }
    if specs.is_empty() {
        return Err(CliError::usage("no aggregations given"));
    }
    let cfg = NsConfig {
        samples: a.samples,
        runs: a.runs,
        grid: log_uniform_grid(a.grid, a.delta_lo, a.delta_hi),
        seed: a.seed,
    };
    cfg.validate().map_err(CliError::usage)?;
    let rows = ns_sweep(&specs, &cfg, a.workers.workers)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    fs::write(&a.out, buf)?;
    let summary = sweep_summary(&rows);
    if let Some(p) = &a.summary {
        fs::write(p, &summary)?;
    }
    print!("{summary}");
    Ok(())
}

fn run_audit(a: AuditArgs) -> CliResult {
    let ds = read_pvr(&a.data)?;
    let hs: Option<HoldoutSpec> = match &a.holdout_manifest {
        Some(p) => {
            let manifest: HoldoutManifest = serde_json::from_slice(&fs::read(p)?)?;
            manifest.holdout.validate()?;
            Some(manifest.holdout)
        }
        None => None,
    };
    let report = oracle::check_dataset(&ds, hs.as_ref())?;
    println!("{}", report.to_json());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "audit failed: {} label mismatches, {} holdout violations",
            report.mismatches.len(),
            report.holdout_violations.len()
        )))
    }
}

fn run_oracle(a: OracleArgs) -> CliResult {
    let spec = a.task.spec()?;
    let counts = oracle::label_distribution(&spec)?;
    let total: u64 = counts.iter().sum();
    println!("label,count");
    for (label, c) in counts.iter().enumerate() {
        println!("{label},{c}");
    }
    eprintln!(
        "{} m={} configurations={total} uniform={}",
        spec.aggregation,
        spec.complexity,
        counts.iter().all(|&c| c == counts[0])
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult {
    let text = fs::read_to_string(&a.config)?;
    let exp: ExperimentConfig = serde_json::from_str(&text).map_err(CliError::usage)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let train_ds = read_pvr(resolve(&exp.train_data))?;
    let eval_sets = exp
        .evals
        .iter()
        .map(|e| read_pvr(resolve(&e.path)))
        .collect::<Result<Vec<_>, _>>()?;
    let named: Vec<NamedDataset<'_>> = exp
        .evals
        .iter()
        .zip(&eval_sets)
        .map(|(e, d)| NamedDataset {
            name: e.name.clone(),
            data: d,
        })
        .collect();
    let report = train(&exp.model, &exp.train, &train_ds, &named)?;
    let out_dir = a
        .out_dir
        .or_else(|| exp.out_dir.as_deref().map(resolve))
        .unwrap_or_else(|| base.to_path_buf());
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("report.json"), report.to_json() + "\n")?;
    let names: Vec<String> = exp.evals.iter().map(|e| e.name.clone()).collect();
    fs::write(out_dir.join("epochs.csv"), report.epochs_csv(&names))?;
    print!(
        "iterations={} train_acc={:.4} ignored={} discarded={}",
        report.iterations, report.final_train_acc, report.ignored, report.discarded
    );
    for e in &report.final_evals {
        print!(" {}_acc={:.4}", e.name, e.accuracy);
    }
    println!();
    if report.failed {
        return Err(CliError {
            code: NUMERIC,
            message: report.failure.unwrap_or_else(|| "training failed".into()),
        });
    }
    Ok(())
}

fn run_visual(a: VisualArgs) -> CliResult {
    let style: Style = a.style.parse().map_err(CliError::usage)?;
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let plan = match (style, a.plan.as_str()) {
        (_, "iid") => pvr_core::dshift::SamplingPlan::iid(style.cells()),
        (Style::Block, phase) => {
            let phase: SplitPhase = phase.parse().map_err(CliError::usage)?;
            visual_split_plan(&PositionalHoldoutRule::default(), phase)?
        }
        (Style::Sequential, other) => {
            return Err(CliError::usage(format!(
                "sequential style supports only --plan iid, got `{other}`"
            )))
        }
    };
    let bank = read_idx(&a.images, &a.labels)?;
    let ds = compose(&bank, style, &plan, a.n, a.seed, a.workers.workers)?;
    write_composed(&ds, &a.out)?;
    println!(
        "wrote {} {}x{} images to {}",
        ds.len(),
        ds.manifest.height,
        ds.manifest.width,
        a.out.display()
    );
    Ok(())
}

fn run_synth_bank(a: SynthBankArgs) -> CliResult {
    let bank = synthetic_bank(a.n, a.seed).map_err(CliError::usage)?;
    write_idx_bank(&bank, &a.out_images, &a.out_labels)?;
    println!("wrote {} synthetic digits (sha256 {})", bank.len(), bank.digest());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Holdout(a) => run_holdout(a),
        Command::Ns(a) => run_ns(a),
        Command::Audit(a) => run_audit(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Train(a) => run_train(a),
        Command::Visual(a) => run_visual(a),
        Command::SynthBank(a) => run_synth_bank(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
