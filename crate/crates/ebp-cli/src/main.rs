//! Command-line front end: model spectra, streaming crossing simulation,
//! crossing-tree estimation, and simulator-versus-exact-tree validation.
//!
//! Exit codes: 0 success; 1 I/O or engine failure; 2 flag misuse,
//! configuration errors, or malformed input; 3 failed assumption checks
//! (`spectral`); 4 failed statistical validation (`validate`).
//!
//! All randomness flows from explicit `--seed` flags, so reruns of one
//! command line are byte-identical. The `EBP_LOG` environment variable
//! controls stderr verbosity only (`debug` enables diagnostics); it never
//! changes what lands on stdout or in output files.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ebp::analyze::{
    estimate, extract_crossing_tree, predicted_log_duration_shift, scale_invariance_check,
};
use ebp::config::parse_model_config;
use ebp::engine::{self, SimulatorState};
use ebp::model::{
    builtin_model, AssumptionCheck, AssumptionReport, BuiltinParams, CheckStatus, ModelError,
    ModelSpec, BUILTIN_MODELS,
};
use ebp::oracle::compare_with_engine;
use ebp::record::{read_all, RecordError, RecordFormat, RecordWriter};

/// Crossings a level must hold before the scale-invariance comparison
/// trusts it.
const MIN_LEVEL_COUNT: usize = 30;

/// Validation verdict threshold in standard errors.
const Z_THRESHOLD: f64 = 3.0;

#[derive(Parser)]
#[command(
    name = "ebp",
    version,
    about = "Embedded-branching crossing-tree toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a model's spectral summary and assumption report.
    Spectral(SpectralArgs),
    /// Stream simulated unit-lattice crossings.
    Simulate(SimulateArgs),
    /// Estimate crossing-tree statistics from a record stream.
    Analyze(AnalyzeArgs),
    /// Cross-check simulated durations against exact tree samples.
    Validate(ValidateArgs),
}

/// Failure carrying the documented exit code it maps to.
#[derive(Debug)]
enum CliError {
    /// Flag misuse, configuration errors, malformed input: exit 2.
    Usage(String),
    /// An assumption check failed under `spectral`: exit 3.
    Assumptions(String),
    /// A statistical check failed under `validate`: exit 4.
    Validation(String),
    /// I/O or engine failure: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Assumptions(_) => 3,
            CliError::Validation(_) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Assumptions(m) | CliError::Validation(m) => m.clone(),
            CliError::Runtime(e) => format!("{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Appends one report line; formatting into a String cannot fail.
macro_rules! out {
    ($buf:expr, $($arg:tt)*) => {
        let _ = writeln!($buf, $($arg)*);
    };
}

/// Writes a finished report to stdout. A consumer that closed the pipe early
/// has seen all it wants; that is success, not an error.
fn emit(report: &str) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    match stdout
        .write_all(report.as_bytes())
        .and_then(|()| stdout.flush())
    {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(CliError::Runtime(anyhow!("writing report: {e}"))),
    }
}

fn debug_logging() -> bool {
    std::env::var("EBP_LOG").is_ok_and(|v| v.eq_ignore_ascii_case("debug"))
}

/// Model source shared by every subcommand: a builtin name or a config file.
#[derive(Args, Clone)]
struct ModelSel {
    /// Builtin model name.
    #[arg(long, value_name = "NAME")]
    builtin: Option<String>,

    /// Model configuration file.
    #[arg(long, value_name = "FILE", conflicts_with = "builtin")]
    model: Option<PathBuf>,
}

impl ModelSel {
    fn given(&self) -> bool {
        self.builtin.is_some() || self.model.is_some()
    }

    /// Loads the selected model along with a display label.
    fn load(&self) -> Result<(ModelSpec, String), CliError> {
        match (&self.builtin, &self.model) {
            (Some(name), None) => {
                let spec = builtin_model(name, &BuiltinParams::default()).map_err(|e| match e {
                    ModelError::UnknownModel(_) => usage(format!(
                        "unknown builtin `{name}`; available: {}",
                        BUILTIN_MODELS.join(", ")
                    )),
                    other => usage(format!("builtin `{name}`: {other}")),
                })?;
                Ok((spec, name.clone()))
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    usage(format!("cannot read model file {}: {e}", path.display()))
                })?;
                let spec = parse_model_config(&text)
                    .map_err(|e| usage(format!("model file {}: {e}", path.display())))?;
                Ok((spec, path.display().to_string()))
            }
            _ => Err(usage(
                "select a model with exactly one of --builtin or --model",
            )),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Spectral(args) => cmd_spectral(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

#[derive(Args)]
struct SpectralArgs {
    #[command(flatten)]
    model: ModelSel,
}

fn cmd_spectral(args: &SpectralArgs) -> Result<(), CliError> {
    let (model, label) = args.model.load()?;
    let spectral = model
        .spectral_summary()
        .map_err(|e| usage(format!("model {label}: {e}")))?;
    let report = model.check_assumptions();

    let mut text = String::new();
    out!(text, "model = {label}");
    out!(text, "mu_plus = {}", spectral.mu_plus);
    out!(text, "mu_minus = {}", spectral.mu_minus);
    out!(text, "mu = {}", spectral.mu);
    out!(text, "hurst_h = {}", spectral.hurst_h);
    out!(text, "fixed_point_a = {}", spectral.fixed_point_a);
    out!(text, "first_up_given_up = {}", spectral.first_up_given_up);
    out!(
        text,
        "first_up_given_down = {}",
        spectral.first_up_given_down
    );
    out!(
        text,
        "m0_up_row = {} {}",
        spectral.m0.row(0)[0],
        spectral.m0.row(0)[1]
    );
    out!(
        text,
        "m0_down_row = {} {}",
        spectral.m0.row(1)[0],
        spectral.m0.row(1)[1]
    );
    out!(
        text,
        "left_u = {} {}",
        spectral.left_u[0],
        spectral.left_u[1]
    );
    out!(
        text,
        "right_v = {} {}",
        spectral.right_v[0],
        spectral.right_v[1]
    );
    out!(
        text,
        "degenerate_straight_line = {}",
        report.degenerate_straight_line
    );
    for (label, check) in [
        ("a1", &report.a1),
        ("a2", &report.a2),
        ("a3", &report.a3),
        ("a4", &report.a4),
    ] {
        print_check(&mut text, label, check);
    }
    out!(text, "assumptions = {}", verdict(report.all_pass()));
    emit(&text)?;

    if report.degenerate_straight_line {
        eprintln!("warning: degenerate straight-line model; every crossing splits in exactly two");
    }
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::Assumptions(format!(
            "assumption checks failed: {}",
            failed_checks(&report).join(", ")
        )))
    }
}

fn print_check(text: &mut String, label: &str, check: &AssumptionCheck) {
    out!(text, "{label}_status = {}", status_name(check.status));
    for (name, value) in &check.quantities {
        out!(text, "{label}_{name} = {value}");
    }
    out!(text, "{label}_tolerance = {}", check.tolerance);
    if !check.note.is_empty() {
        out!(text, "{label}_note = {}", check.note);
    }
}

fn status_name(status: CheckStatus) -> &'static str {
    match status {
        CheckStatus::Pass => "pass",
        CheckStatus::Fail => "fail",
        CheckStatus::Unverifiable => "unverifiable",
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

fn failed_checks(report: &AssumptionReport) -> Vec<&'static str> {
    [
        ("a1 supercriticality", &report.a1),
        ("a2 conservation", &report.a2),
        ("a3 crossing drift", &report.a3),
        ("a4 spinal drift", &report.a4),
    ]
    .into_iter()
    .filter(|(_, check)| check.status != CheckStatus::Pass)
    .map(|(name, _)| name)
    .collect()
}

/// Failed checks do not block simulation; the warning goes to stderr so the
/// record stream stays clean.
fn warn_assumptions(model: &ModelSpec) {
    let report = model.check_assumptions();
    if report.degenerate_straight_line {
        eprintln!("warning: degenerate straight-line model; every crossing splits in exactly two");
    }
    if !report.all_pass() {
        eprintln!(
            "warning: assumption checks failed ({}); simulating anyway",
            failed_checks(&report).join(", ")
        );
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Ndjson,
    Csv,
}

impl From<FormatArg> for RecordFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ndjson => RecordFormat::Ndjson,
            FormatArg::Csv => RecordFormat::Csv,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelSel,

    /// Unit crossings to emit.
    #[arg(long)]
    steps: u64,

    /// RNG seed; replica r uses seed + r. Required unless resuming.
    #[arg(long)]
    seed: Option<u64>,

    /// Start from the stationary environment at a lattice hit instead of a
    /// fixed origin.
    #[arg(long)]
    random_start: bool,

    /// Output file (stdout when absent).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Record encoding; defaults to the output extension, else ndjson.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,

    /// Write a resumable snapshot of the final state to this file.
    #[arg(long, value_name = "FILE")]
    snapshot: Option<PathBuf>,

    /// Resume from a snapshot file instead of a fresh state.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,

    /// Independent replicas run on worker threads, one output file each.
    #[arg(long, default_value_t = 1)]
    replicas: u64,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let debug = debug_logging();
    if args.replicas == 0 {
        return Err(usage("--replicas must be at least 1"));
    }
    let format = args
        .format
        .map(RecordFormat::from)
        .unwrap_or_else(|| infer_format(args.out.as_deref()));

    if let Some(path) = &args.resume {
        if args.model.given() || args.seed.is_some() || args.random_start {
            return Err(usage(
                "--resume carries its own model, seed, and start mode; drop those flags",
            ));
        }
        if args.replicas > 1 {
            return Err(usage(
                "--resume restores a single run; --replicas does not apply",
            ));
        }
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read snapshot {}: {e}", path.display())))?;
        let state = SimulatorState::restore_json(&text)
            .map_err(|e| usage(format!("snapshot {}: {e}", path.display())))?;
        warn_assumptions(state.model());
        return run_replica(
            state,
            args.steps,
            args.out.as_deref(),
            format,
            args.snapshot.as_deref(),
            debug,
        );
    }

    let (model, _label) = args.model.load()?;
    let Some(seed) = args.seed else {
        return Err(usage(
            "--seed is required; runs never draw implicit entropy",
        ));
    };
    warn_assumptions(&model);

    if args.replicas == 1 {
        let state = init_state(model, seed, args.random_start)?;
        return run_replica(
            state,
            args.steps,
            args.out.as_deref(),
            format,
            args.snapshot.as_deref(),
            debug,
        );
    }

    let Some(out) = args.out.as_deref() else {
        return Err(usage(
            "--replicas needs --out; replica outputs are separate files",
        ));
    };
    if args.snapshot.is_some() {
        return Err(usage("--snapshot applies to single runs only"));
    }
    let steps = args.steps;
    let random_start = args.random_start;
    let results: Vec<Result<(), CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..args.replicas)
            .map(|r| {
                let model = model.clone();
                let path = replica_path(out, r);
                scope.spawn(move || {
                    let state = init_state(model, seed.wrapping_add(r), random_start)?;
                    run_replica(state, steps, Some(&path), format, None, debug)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replica thread panicked"))
            .collect()
    });
    for result in results {
        result?;
    }
    if debug {
        eprintln!(
            "debug: {} replicas of {steps} crossings done",
            args.replicas
        );
    }
    Ok(())
}

fn init_state(model: ModelSpec, seed: u64, random_start: bool) -> Result<SimulatorState, CliError> {
    let result = if random_start {
        engine::initialize_random_start(model, seed)
    } else {
        engine::initialize(model, seed)
    };
    result.map_err(|e| CliError::Runtime(anyhow!("initializing simulator: {e}")))
}

fn is_broken_pipe(e: &RecordError) -> bool {
    matches!(e, RecordError::Io(io_err) if io_err.kind() == io::ErrorKind::BrokenPipe)
}

fn infer_format(out: Option<&Path>) -> RecordFormat {
    match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => RecordFormat::Csv,
        _ => RecordFormat::Ndjson,
    }
}

/// `runs.ndjson` becomes `runs.r3.ndjson` for replica 3.
fn replica_path(base: &Path, replica: u64) -> PathBuf {
    match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => base.with_extension(format!("r{replica}.{ext}")),
        None => base.with_extension(format!("r{replica}")),
    }
}

fn run_replica(
    mut state: SimulatorState,
    steps: u64,
    out: Option<&Path>,
    format: RecordFormat,
    snapshot: Option<&Path>,
    debug: bool,
) -> Result<(), CliError> {
    let started = Instant::now();
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(io::BufWriter::new(File::create(path).map_err(|e| {
            CliError::Runtime(anyhow!("cannot create output file {}: {e}", path.display()))
        })?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    };
    let mut writer = RecordWriter::new(sink, format);
    let mut write_err: Option<RecordError> = None;
    state
        .run(steps, |point| {
            if write_err.is_none() {
                if let Err(e) = writer.write(&point) {
                    write_err = Some(e);
                }
            }
        })
        .map_err(|e| CliError::Runtime(anyhow!("simulation failed: {e}")))?;
    // A consumer that closed the stream early got all it wants; anything
    // else lost records and must fail loudly.
    if let Some(e) = write_err {
        if !is_broken_pipe(&e) {
            return Err(CliError::Runtime(anyhow!("writing records: {e}")));
        }
    } else if let Err(e) = writer.flush() {
        if !is_broken_pipe(&e) {
            return Err(CliError::Runtime(anyhow!("flushing records: {e}")));
        }
    }
    if let Some(path) = snapshot {
        fs::write(path, state.snapshot_json())
            .map_err(|e| CliError::Runtime(anyhow!("writing snapshot {}: {e}", path.display())))?;
    }
    if debug {
        eprintln!(
            "debug: emitted {steps} crossings to t = {} (stack depth {}) in {:.3?}",
            state.t(),
            state.depth(),
            started.elapsed()
        );
    }
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Record stream to analyze.
    input: PathBuf,

    #[command(flatten)]
    model: ModelSel,

    /// Record encoding; sniffed from the first line when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,

    /// Cap on the extracted tree depth.
    #[arg(long)]
    depth: Option<usize>,
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let debug = debug_logging();
    let started = Instant::now();
    let model = if args.model.given() {
        Some(args.model.load()?)
    } else {
        None
    };

    let file = File::open(&args.input)
        .map_err(|e| usage(format!("cannot open {}: {e}", args.input.display())))?;
    let points = read_all(BufReader::new(file), args.format.map(RecordFormat::from)).map_err(
        |e| match e {
            RecordError::Parse { .. } => usage(format!("{}: {e}", args.input.display())),
            RecordError::Io(io_err) => {
                CliError::Runtime(anyhow!("reading {}: {io_err}", args.input.display()))
            }
        },
    )?;
    let tree = extract_crossing_tree(&points, args.depth)
        .map_err(|e| usage(format!("{}: {e}", args.input.display())))?;
    let report = estimate(&tree).map_err(|e| usage(format!("{}: {e}", args.input.display())))?;

    let mut text = String::new();
    out!(text, "records = {}", points.len());
    out!(text, "levels = {}", tree.levels.len());
    out!(
        text,
        "# level crossings mean_z se_z mean_duration discarded"
    );
    for level in &report.per_level {
        let discarded = tree.discarded.get(level.level).copied().unwrap_or(0);
        out!(
            text,
            "{} {} {} {} {} {}",
            level.level,
            level.crossings,
            level.mean_z,
            level.se_z,
            level.mean_duration,
            discarded
        );
    }
    out!(text, "pooled_crossings = {}", report.pooled.crossings);
    out!(text, "pooled_mean_z = {}", report.pooled.mean_z);
    out!(text, "pooled_se_z = {}", report.pooled.se_z);
    out!(text, "pooled_up_mean_z = {}", report.pooled_up.mean_z);
    out!(text, "pooled_up_se_z = {}", report.pooled_up.se_z);
    out!(text, "pooled_down_mean_z = {}", report.pooled_down.mean_z);
    out!(text, "pooled_down_se_z = {}", report.pooled_down.se_z);

    let (mu, mu_source) = match &model {
        Some((spec, label)) => {
            let s = spec
                .spectral_summary()
                .map_err(|e| usage(format!("model {label}: {e}")))?;
            (s.mu, "model")
        }
        None => (report.pooled.mean_z, "estimated"),
    };
    out!(text, "mu = {mu}");
    out!(text, "mu_source = {mu_source}");

    let durations = tree.durations_by_level();
    let n1 = 1usize;
    let n2 = (n1 + 1..durations.len())
        .rev()
        .find(|&n| durations[n].len() >= MIN_LEVEL_COUNT);
    let scale = match n2 {
        Some(n2) if durations.len() > n1 && durations[n1].len() >= MIN_LEVEL_COUNT => {
            let scale = scale_invariance_check(&durations, mu, n1, n2, MIN_LEVEL_COUNT)
                .map_err(|e| usage(format!("scale check: {e}")))?;
            out!(text, "scale_levels = {} {}", scale.n1, scale.n2);
            out!(text, "shift_per_level = {}", scale.shift_per_level);
            out!(text, "shift_se = {}", scale.shift_se);
            out!(text, "log_mu = {}", scale.log_mu);
            out!(text, "shift_z_vs_log_mu = {}", scale.z_vs_log_mu);
            let _ = write!(text, "atom_fraction =");
            for fraction in &scale.atom_fraction {
                let _ = write!(text, " {fraction}");
            }
            out!(text, "");
            out!(text, "scale_sufficient = {}", scale.sufficient);
            Some(scale)
        }
        _ => {
            out!(
                text,
                "scale_check = skipped (need two levels of at least {MIN_LEVEL_COUNT} crossings)"
            );
            None
        }
    };

    if let Some((spec, label)) = &model {
        let predicted =
            predicted_log_duration_shift(spec).map_err(|e| usage(format!("model {label}: {e}")))?;
        out!(text, "predicted_shift = {predicted}");
        if let Some(scale) = &scale {
            if scale.shift_se > 0.0 {
                out!(
                    text,
                    "shift_z_vs_predicted = {}",
                    (scale.shift_per_level - predicted) / scale.shift_se
                );
            }
        }
    }
    emit(&text)?;
    if debug {
        eprintln!(
            "debug: analyzed {} records in {:.3?}",
            points.len(),
            started.elapsed()
        );
    }
    Ok(())
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    model: ModelSel,

    /// Builtin oracle model; defaults to the simulated model.
    #[arg(long, value_name = "NAME", conflicts_with = "oracle_model")]
    oracle_builtin: Option<String>,

    /// Oracle model configuration file.
    #[arg(long, value_name = "FILE")]
    oracle_model: Option<PathBuf>,

    /// Tree depth the comparison runs at.
    #[arg(long, default_value_t = 4)]
    depth: usize,

    /// Leading unit crossings averaged per sample (at most 2^depth).
    #[arg(long, default_value_t = 16)]
    steps: usize,

    /// Simulator runs.
    #[arg(long, default_value_t = 400)]
    replicas: usize,

    /// Exact tree samples.
    #[arg(long, default_value_t = 400)]
    trees: usize,

    /// RNG seed.
    #[arg(long)]
    seed: u64,
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let debug = debug_logging();
    let started = Instant::now();
    let (engine_model, engine_label) = args.model.load()?;
    let oracle_sel = ModelSel {
        builtin: args.oracle_builtin.clone(),
        model: args.oracle_model.clone(),
    };
    let (oracle_model, oracle_label) = if oracle_sel.given() {
        oracle_sel.load()?
    } else {
        (engine_model.clone(), engine_label.clone())
    };

    if args.depth == 0 || args.depth > 32 {
        return Err(usage("--depth must be between 1 and 32"));
    }
    if args.steps == 0 || args.steps > 1usize << args.depth {
        return Err(usage(format!(
            "--steps must be between 1 and 2^{} = {}, the crossings one level-{} crossing holds",
            args.depth,
            1usize << args.depth,
            args.depth
        )));
    }
    if args.replicas < 2 || args.trees < 2 {
        return Err(usage(
            "--replicas and --trees must be at least 2 for standard errors",
        ));
    }

    let comparison = compare_with_engine(
        &engine_model,
        &oracle_model,
        args.depth,
        args.steps,
        args.replicas,
        args.trees,
        args.seed,
    )
    .map_err(|e| CliError::Runtime(anyhow!("comparison failed: {e}")))?;

    let mut text = String::new();
    out!(text, "engine_model = {engine_label}");
    out!(text, "oracle_model = {oracle_label}");
    out!(text, "level = {}", args.depth);
    out!(text, "crossings_per_sample = {}", args.steps);
    out!(text, "replicas = {}", args.replicas);
    out!(text, "trees = {}", args.trees);
    out!(text, "engine_mean = {}", comparison.engine_mean);
    out!(text, "engine_se = {}", comparison.engine_se);
    out!(text, "oracle_mean = {}", comparison.oracle_mean);
    out!(text, "oracle_se = {}", comparison.oracle_se);
    out!(text, "z = {}", comparison.z);
    out!(text, "threshold = {Z_THRESHOLD}");
    let pass = comparison.z.abs() <= Z_THRESHOLD;
    out!(text, "verdict = {}", verdict(pass));
    emit(&text)?;
    if debug {
        eprintln!("debug: compared in {:.3?}", started.elapsed());
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "mean durations differ by {} standard errors (threshold {Z_THRESHOLD})",
            comparison.z
        )))
    }
}
