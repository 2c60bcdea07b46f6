//! Command-line driver for oblique decision tree experiments.
//!
//! Subcommands: `train`, `eval`, `sweep`, `timing`, `depth-sweep`. All output
//! is line-delimited `key=value` records with a fixed key order per record
//! type, suitable for `grep`/`awk` pipelines and for exact replay: every run
//! record carries the seed, the hyperparameters, and a SHA-256 hash of each
//! input file.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use obtree::{
    accuracy, active_leaves, build_axis_aligned, build_random_oblique, co2_refine, empirical_loss,
    sgd_step, surrogate_loss, train_sgd, train_ssgd, BoundMode, Dataset, EpochRecord,
    GreedyError, InferenceMode, LossKind, MomentumState, OptimizerConfig, OptimizerError,
    TreeModel, TreeTopology,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "obtree",
    version,
    about = "Oblique decision trees trained by minimizing a convex upper bound on empirical loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single tree and write the model and metric records.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Grid-search the norm budget and learning rate on a validation set,
    /// then retrain the winner on train + validation.
    Sweep(SweepArgs),
    /// Time one training epoch per depth under exact and fast inference.
    Timing(TimingArgs),
    /// Compare initialization and training methods across depths.
    DepthSweep(DepthSweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgoFlag {
    Sgd,
    Ssgd,
}

impl AlgoFlag {
    fn name(self) -> &'static str {
        match self {
            AlgoFlag::Sgd => "sgd",
            AlgoFlag::Ssgd => "ssgd",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InferenceFlag {
    Exact,
    Fast,
}

impl InferenceFlag {
    fn mode(self) -> InferenceMode {
        match self {
            InferenceFlag::Exact => InferenceMode::Exact,
            InferenceFlag::Fast => InferenceMode::Fast,
        }
    }

    fn name(self) -> &'static str {
        match self {
            InferenceFlag::Exact => "exact",
            InferenceFlag::Fast => "fast",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitFlag {
    /// Greedy axis-aligned tree.
    Axis,
    /// Axis-aligned tree with every split re-optimized node by node.
    Co2,
    /// Greedy tree over random oblique split candidates.
    Random,
}

impl InitFlag {
    fn name(self) -> &'static str {
        match self {
            InitFlag::Axis => "axis",
            InitFlag::Co2 => "co2",
            InitFlag::Random => "random",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training data in LibSVM format.
    #[arg(long)]
    train: PathBuf,
    /// Validation data; the best-validation iterate is kept.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Carve this fraction of the training data out as a validation set.
    #[arg(long)]
    val_frac: Option<f64>,
    /// Held-out data reported on after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Row-wise squared-norm budget for the split matrix.
    #[arg(long, default_value_t = 4.0)]
    nu: f64,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, value_enum, default_value_t = AlgoFlag::Sgd)]
    algo: AlgoFlag,
    #[arg(long, value_enum, default_value_t = InferenceFlag::Fast)]
    inference: InferenceFlag,
    #[arg(long, value_enum, default_value_t = InitFlag::Axis)]
    init: InitFlag,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to save the trained model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Mirror all metric records to this file (they always go to stdout).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// A model file produced by `train` or `sweep`.
    #[arg(long)]
    model: PathBuf,
    /// Data to evaluate on, in LibSVM format.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Comma-separated norm budgets to try.
    #[arg(long, default_value = "0.1,1,4,10,43,100")]
    nu_grid: String,
    /// Comma-separated learning rates to try.
    #[arg(long, default_value = "0.03,0.1,0.3")]
    lr_grid: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, value_enum, default_value_t = AlgoFlag::Sgd)]
    algo: AlgoFlag,
    #[arg(long, value_enum, default_value_t = InferenceFlag::Fast)]
    inference: InferenceFlag,
    #[arg(long, value_enum, default_value_t = InitFlag::Axis)]
    init: InitFlag,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct TimingArgs {
    /// Dataset to time on; a synthetic 5000 x 50 dataset is used if absent.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Comma-separated tree depths.
    #[arg(long, default_value = "6,8,10,12,14")]
    depths: String,
    /// Repetitions per (depth, inference mode); the median is reported.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct DepthSweepArgs {
    #[arg(long)]
    train: PathBuf,
    /// Held-out data; an internal 80/20 split is used if absent.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated tree depths.
    #[arg(long, default_value = "2,4,6,8")]
    depths: String,
    #[arg(long, default_value_t = 4.0)]
    nu: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, value_enum, default_value_t = InferenceFlag::Fast)]
    inference: InferenceFlag,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

/// Errors carrying the process exit code: 1 usage, 2 data, 3 numeric.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn optimizer_error(err: OptimizerError) -> CliError {
    match err {
        OptimizerError::NonFiniteGradient { .. } => CliError::Numeric(err.to_string()),
        OptimizerError::InvalidConfig(_) => CliError::Usage(err.to_string()),
        _ => CliError::Data(err.to_string()),
    }
}

fn greedy_error(err: GreedyError) -> CliError {
    match err {
        GreedyError::InvalidParameter(_) | GreedyError::Tree(_) => CliError::Usage(err.to_string()),
        GreedyError::Optimizer(inner) => optimizer_error(inner),
        _ => CliError::Data(err.to_string()),
    }
}

/// Writes metric records to stdout and mirrors them to an optional file.
/// If stdout closes early (e.g. piped into `head`), the run keeps going and
/// the metrics file stays complete.
struct Sink {
    stdout_open: bool,
    file: Option<fs::File>,
}

impl Sink {
    fn open(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => Some(fs::File::create(p).map_err(|e| {
                CliError::Data(format!("cannot create {}: {e}", p.display()))
            })?),
            None => None,
        };
        Ok(Sink { stdout_open: true, file })
    }

    fn emit(&mut self, line: &str) -> Result<(), CliError> {
        if self.stdout_open {
            if let Err(e) = writeln!(std::io::stdout(), "{line}") {
                if e.kind() == std::io::ErrorKind::BrokenPipe {
                    self.stdout_open = false;
                } else {
                    return Err(CliError::Data(format!("cannot write to stdout: {e}")));
                }
            }
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")
                .map_err(|e| CliError::Data(format!("cannot write metrics: {e}")))?;
        }
        Ok(())
    }
}

struct LoadedData {
    data: Dataset,
    sha256: String,
}

fn load_dataset(path: &Path) -> Result<LoadedData, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let sha256 = hex_digest(&bytes);
    let mut data = Dataset::parse_libsvm(&bytes[..])
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: dataset is empty", path.display())));
    }
    data.augment()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(LoadedData { data, sha256 })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn parse_f64_list(text: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    let values: Result<Vec<f64>, _> = text
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>())
        .collect();
    let mut values =
        values.map_err(|e| CliError::Usage(format!("invalid {flag} value in `{text}`: {e}")))?;
    if values.is_empty() {
        return Err(CliError::Usage(format!("{flag} is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Usage(format!("{flag} contains a non-finite value")));
    }
    // Ascending order so that keeping the first minimum in a sweep breaks
    // ties toward the smaller value.
    values.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
    values.dedup();
    Ok(values)
}

fn parse_usize_list(text: &str, flag: &str) -> Result<Vec<usize>, CliError> {
    let values: Result<Vec<usize>, _> = text
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>())
        .collect();
    let values =
        values.map_err(|e| CliError::Usage(format!("invalid {flag} value in `{text}`: {e}")))?;
    if values.is_empty() {
        return Err(CliError::Usage(format!("{flag} is empty")));
    }
    Ok(values)
}

fn check_depth(depth: usize) -> Result<(), CliError> {
    if depth < 1 {
        return Err(CliError::Usage("--depth must be at least 1".to_string()));
    }
    Ok(())
}

fn check_loop_flags(epochs: usize, batch: usize) -> Result<(), CliError> {
    if epochs < 1 {
        return Err(CliError::Usage("--epochs must be at least 1".to_string()));
    }
    if batch < 1 {
        return Err(CliError::Usage("--batch must be at least 1".to_string()));
    }
    Ok(())
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "na".to_string(),
    }
}

/// Builds the greedy model named by `--init`. The returned model carries the
/// greedy leaf parameters; callers log its accuracy, then training restarts
/// the leaves from zero (see `reset_leaves`).
fn greedy_init(
    flag: InitFlag,
    data: &Dataset,
    depth: usize,
    config: &OptimizerConfig,
) -> Result<TreeModel, CliError> {
    match flag {
        InitFlag::Axis => build_axis_aligned(data, depth, config.nu).map_err(greedy_error),
        InitFlag::Co2 => {
            let axis = build_axis_aligned(data, depth, config.nu).map_err(greedy_error)?;
            co2_refine(&axis, data, config).map_err(greedy_error)
        }
        InitFlag::Random => {
            build_random_oblique(data, depth, 20, config.nu, config.seed).map_err(greedy_error)
        }
    }
}

/// Keeps the greedy splits but restarts the leaf parameters at zero. Training
/// from confident greedy leaves collapses routing into a single leaf (the
/// shared bias coordinate grows every margin at once); zeroed leaves let the
/// splits and leaf values co-adapt.
fn reset_leaves(model: &TreeModel) -> TreeModel {
    let theta = Array2::zeros(model.theta().dim());
    TreeModel::new(model.topology(), model.task(), model.w().clone(), theta)
        .expect("zeroing leaf parameters preserves validity")
}

fn train_via(
    algo: AlgoFlag,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &OptimizerConfig,
    init: &TreeModel,
) -> Result<(TreeModel, Vec<EpochRecord>), CliError> {
    let run = match algo {
        AlgoFlag::Sgd => train_sgd,
        AlgoFlag::Ssgd => train_ssgd,
    };
    run(data, val, config, init).map_err(optimizer_error)
}

fn eval_error(model: &TreeModel, data: &Dataset) -> Result<f64, CliError> {
    let acc = accuracy(model, data).map_err(optimizer_error)?;
    Ok(match acc {
        Some(a) => 1.0 - a,
        None => empirical_loss(model, data).map_err(|e| CliError::Data(e.to_string()))?,
    })
}

fn emit_final(
    sink: &mut Sink,
    split: &str,
    model: &TreeModel,
    data: &Dataset,
) -> Result<(), CliError> {
    let acc = accuracy(model, data).map_err(optimizer_error)?;
    let loss = empirical_loss(model, data).map_err(|e| CliError::Data(e.to_string()))?;
    let bound =
        surrogate_loss(model, data, BoundMode::Fast).map_err(|e| CliError::Data(e.to_string()))?;
    let leaves = active_leaves(model, data).map_err(optimizer_error)?;
    sink.emit(&format!(
        "record=final split={split} accuracy={} empirical_loss={loss} surrogate_loss={bound} active_leaves={leaves}",
        fmt_opt(acc)
    ))
}

fn emit_epochs(sink: &mut Sink, records: &[EpochRecord]) -> Result<(), CliError> {
    for r in records {
        sink.emit(&format!(
            "record=epoch epoch={} empirical_loss={} surrogate_loss={} train_accuracy={} val_accuracy={} active_leaves={} wall_ms={}",
            r.epoch,
            r.empirical_loss,
            r.surrogate_loss,
            fmt_opt(r.train_accuracy),
            fmt_opt(r.val_accuracy),
            r.active_leaves,
            r.wall_ms
        ))?;
    }
    Ok(())
}

fn steps_for(epochs: usize, n: usize, batch: usize) -> Result<usize, CliError> {
    if epochs < 1 {
        return Err(CliError::Usage("--epochs must be at least 1".to_string()));
    }
    if batch < 1 {
        return Err(CliError::Usage("--batch must be at least 1".to_string()));
    }
    Ok(epochs * n.div_ceil(batch))
}

/// Resolves --val / --val-frac into (train, Option<val>). With --val-frac the
/// split is seeded by --seed, so reruns are identical.
fn resolve_validation(
    train: Dataset,
    val: Option<&LoadedData>,
    val_frac: Option<f64>,
    seed: u64,
) -> Result<(Dataset, Option<Dataset>), CliError> {
    match (val, val_frac) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--val and --val-frac are mutually exclusive".to_string(),
        )),
        (Some(loaded), None) => Ok((train, Some(loaded.data.clone()))),
        (None, Some(frac)) => {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(CliError::Usage(format!(
                    "--val-frac must be in (0, 1), got {frac}"
                )));
            }
            let parts = train
                .split(&[1.0 - frac, frac], seed)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let mut iter = parts.into_iter();
            let tr = iter.next().expect("two split parts");
            let va = iter.next().expect("two split parts");
            Ok((tr, Some(va)))
        }
        (None, None) => Ok((train, None)),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    check_depth(args.depth)?;
    check_loop_flags(args.epochs, args.batch)?;
    let mut sink = Sink::open(args.metrics_out.as_deref())?;
    let loaded = load_dataset(&args.train)?;
    let val_loaded = args.val.as_deref().map(load_dataset).transpose()?;
    let test_loaded = args.test.as_deref().map(load_dataset).transpose()?;
    let (train, val) =
        resolve_validation(loaded.data, val_loaded.as_ref(), args.val_frac, args.seed)?;

    let mut run = format!(
        "record=run cmd=train seed={} depth={} nu={} lr={} epochs={} batch={} momentum={} algo={} inference={} init={} train_file={} train_sha256={} train_examples={}",
        args.seed, args.depth, args.nu, args.lr, args.epochs, args.batch, args.momentum,
        args.algo.name(), args.inference.name(), args.init.name(),
        args.train.display(), loaded.sha256, train.len()
    );
    if let (Some(path), Some(v)) = (&args.val, &val_loaded) {
        let _ = write!(
            run,
            " val_file={} val_sha256={} val_examples={}",
            path.display(),
            v.sha256,
            v.data.len()
        );
    } else if let Some(frac) = args.val_frac {
        let _ = write!(
            run,
            " val_frac={frac} val_examples={}",
            val.as_ref().map_or(0, Dataset::len)
        );
    }
    if let (Some(path), Some(t)) = (&args.test, &test_loaded) {
        let _ = write!(
            run,
            " test_file={} test_sha256={} test_examples={}",
            path.display(),
            t.sha256,
            t.data.len()
        );
    }
    sink.emit(&run)?;

    let config = OptimizerConfig {
        nu: args.nu,
        eta: args.lr,
        tau: steps_for(args.epochs, train.len(), args.batch)?,
        batch_size: args.batch,
        momentum: args.momentum,
        inference: args.inference.mode(),
        seed: args.seed,
        ..OptimizerConfig::default()
    };

    let greedy = greedy_init(args.init, &train, args.depth, &config)?;
    let init_acc = accuracy(&greedy, &train).map_err(optimizer_error)?;
    let init_val = match &val {
        Some(v) => accuracy(&greedy, v).map_err(optimizer_error)?,
        None => None,
    };
    sink.emit(&format!(
        "record=init method={} train_accuracy={} val_accuracy={}",
        args.init.name(),
        fmt_opt(init_acc),
        fmt_opt(init_val)
    ))?;

    let (model, records) =
        train_via(args.algo, &train, val.as_ref(), &config, &reset_leaves(&greedy))?;
    emit_epochs(&mut sink, &records)?;
    emit_final(&mut sink, "train", &model, &train)?;
    if let Some(v) = &val {
        emit_final(&mut sink, "val", &model, v)?;
    }
    if let Some(t) = &test_loaded {
        emit_final(&mut sink, "test", &model, &t.data)?;
    }
    if let Some(path) = &args.model_out {
        model
            .save(path)
            .map_err(|e| CliError::Data(format!("cannot save {}: {e}", path.display())))?;
        sink.emit(&format!("record=model file={}", path.display()))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut sink = Sink::open(args.metrics_out.as_deref())?;
    let model = TreeModel::load(&args.model)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let loaded = load_dataset(&args.test)?;
    if model.num_features() != loaded.data.width() {
        return Err(CliError::Data(format!(
            "model expects {} features, {} has {}",
            model.num_features(),
            args.test.display(),
            loaded.data.width()
        )));
    }
    sink.emit(&format!(
        "record=run cmd=eval model_file={} data_file={} data_sha256={} data_examples={}",
        args.model.display(),
        args.test.display(),
        loaded.sha256,
        loaded.data.len()
    ))?;
    emit_final(&mut sink, "data", &model, &loaded.data)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    check_depth(args.depth)?;
    check_loop_flags(args.epochs, args.batch)?;
    if args.val.is_none() && args.val_frac.is_none() {
        return Err(CliError::Usage(
            "sweep needs --val or --val-frac for model selection".to_string(),
        ));
    }
    let nus = parse_f64_list(&args.nu_grid, "--nu-grid")?;
    let lrs = parse_f64_list(&args.lr_grid, "--lr-grid")?;

    let mut sink = Sink::open(args.metrics_out.as_deref())?;
    let loaded = load_dataset(&args.train)?;
    let val_loaded = args.val.as_deref().map(load_dataset).transpose()?;
    let test_loaded = args.test.as_deref().map(load_dataset).transpose()?;
    let (train, val) =
        resolve_validation(loaded.data, val_loaded.as_ref(), args.val_frac, args.seed)?;
    let val = val.expect("validation presence checked above");

    let mut run = format!(
        "record=run cmd=sweep seed={} depth={} nu_grid={} lr_grid={} epochs={} batch={} momentum={} algo={} inference={} init={} train_file={} train_sha256={} train_examples={} val_examples={}",
        args.seed, args.depth, args.nu_grid, args.lr_grid, args.epochs, args.batch,
        args.momentum, args.algo.name(), args.inference.name(), args.init.name(),
        args.train.display(), loaded.sha256, train.len(), val.len()
    );
    if let (Some(path), Some(t)) = (&args.test, &test_loaded) {
        let _ = write!(
            run,
            " test_file={} test_sha256={} test_examples={}",
            path.display(),
            t.sha256,
            t.data.len()
        );
    }
    sink.emit(&run)?;

    let tau = steps_for(args.epochs, train.len(), args.batch)?;
    let base = OptimizerConfig {
        eta: lrs[0], // every use overrides nu and eta per grid point
        tau,
        batch_size: args.batch,
        momentum: args.momentum,
        inference: args.inference.mode(),
        seed: args.seed,
        ..OptimizerConfig::default()
    };

    // Grid points are independent and internally deterministic, so they can
    // run concurrently; records are emitted afterwards in grid order.
    let mut grid: Vec<(f64, f64)> = Vec::new();
    for &nu in &nus {
        for &lr in &lrs {
            grid.push((nu, lr));
        }
    }
    let results: Vec<Result<(f64, Option<f64>), CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&(nu, lr)| {
                let base = &base;
                let train = &train;
                let val = &val;
                let depth = args.depth;
                let (algo, init_flag) = (args.algo, args.init);
                scope.spawn(move || {
                    let config = OptimizerConfig { nu, eta: lr, ..base.clone() };
                    let greedy = greedy_init(init_flag, train, depth, &config)?;
                    let (model, _) =
                        train_via(algo, train, Some(val), &config, &reset_leaves(&greedy))?;
                    Ok((eval_error(&model, val)?, accuracy(&model, val).map_err(optimizer_error)?))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("grid worker never panics"))
            .collect()
    });

    let mut best: Option<(f64, f64, f64)> = None;
    for (&(nu, lr), result) in grid.iter().zip(results) {
        let (err, acc) = result?;
        sink.emit(&format!(
            "record=grid nu={nu} lr={lr} val_error={err} val_accuracy={}",
            fmt_opt(acc)
        ))?;
        let better = match best {
            None => true,
            // Grid order is (nu ascending, lr ascending), so keeping the
            // first minimum implements the smaller-nu-then-smaller-lr tie rule.
            Some((best_err, _, _)) => err < best_err,
        };
        if better {
            best = Some((err, nu, lr));
        }
    }
    let (win_err, win_nu, win_lr) = best.expect("grid is nonempty");
    sink.emit(&format!(
        "record=winner nu={win_nu} lr={win_lr} val_error={win_err}"
    ))?;

    // Retrain the winner on train + validation.
    let union = train.concat(&val).map_err(|e| CliError::Data(e.to_string()))?;
    let config = OptimizerConfig {
        nu: win_nu,
        eta: win_lr,
        tau: steps_for(args.epochs, union.len(), args.batch)?,
        ..base
    };
    let greedy = greedy_init(args.init, &union, args.depth, &config)?;
    let (model, _) = train_via(args.algo, &union, None, &config, &reset_leaves(&greedy))?;
    emit_final(&mut sink, "union", &model, &union)?;
    if let Some(t) = &test_loaded {
        emit_final(&mut sink, "test", &model, &t.data)?;
    }
    if let Some(path) = &args.model_out {
        model
            .save(path)
            .map_err(|e| CliError::Data(format!("cannot save {}: {e}", path.display())))?;
        sink.emit(&format!("record=model file={}", path.display()))?;
    }
    Ok(())
}

fn median_ms(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    times[times.len() / 2]
}

fn cmd_timing(args: TimingArgs) -> Result<(), CliError> {
    let depths = parse_usize_list(&args.depths, "--depths")?;
    for &d in &depths {
        check_depth(d)?;
    }
    if args.reps < 1 {
        return Err(CliError::Usage("--reps must be at least 1".to_string()));
    }
    let mut sink = Sink::open(args.metrics_out.as_deref())?;

    let (data, source) = match &args.train {
        Some(path) => {
            let loaded = load_dataset(path)?;
            let source = format!(
                "train_file={} train_sha256={}",
                path.display(),
                loaded.sha256
            );
            (loaded.data, source)
        }
        None => {
            let mut data = obtree::make_random_dense(5_000, 50, 2, args.seed);
            data.augment().map_err(|e| CliError::Data(e.to_string()))?;
            (data, "synthetic=random-dense".to_string())
        }
    };
    sink.emit(&format!(
        "record=run cmd=timing seed={} depths={} reps={} batch={} lr={} nu={} {source} examples={} features={}",
        args.seed, args.depths, args.reps, args.batch, args.lr, args.nu,
        data.len(), data.width()
    ))?;

    let indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for &depth in &depths {
        let topology = TreeTopology::new(depth).map_err(|e| CliError::Usage(e.to_string()))?;
        let m = topology.internal_count();
        let w = Array2::from_shape_fn((m, data.width()), |_| rng.random_range(-0.2..0.2));
        let theta =
            Array2::from_shape_fn((m + 1, data.num_outputs()), |_| rng.random_range(-0.5..0.5));
        let task = if data.is_classification() { LossKind::Log } else { LossKind::Squared };
        let model = TreeModel::new(topology, task, w, theta)
            .map_err(|e| CliError::Data(e.to_string()))?;

        let mut medians = Vec::new();
        for flag in [InferenceFlag::Exact, InferenceFlag::Fast] {
            let config = OptimizerConfig {
                nu: args.nu,
                eta: args.lr,
                batch_size: args.batch,
                momentum: 0.0,
                inference: flag.mode(),
                seed: args.seed,
                ..OptimizerConfig::default()
            };
            let mut times = Vec::new();
            for _ in 0..args.reps {
                let mut candidate = model.clone();
                let mut state = MomentumState::new();
                let tick = Instant::now();
                for batch in indices.chunks(args.batch) {
                    sgd_step(&mut candidate, &data, batch, &config, &mut state)
                        .map_err(optimizer_error)?;
                }
                times.push(tick.elapsed().as_secs_f64() * 1e3);
            }
            let median = median_ms(times.clone());
            let runs = times
                .iter()
                .map(|t| format!("{t:.3}"))
                .collect::<Vec<_>>()
                .join("|");
            sink.emit(&format!(
                "record=timing depth={depth} inference={} reps={} median_ms={median:.3} runs_ms={runs}",
                flag.name(),
                args.reps
            ))?;
            medians.push(median);
        }
        sink.emit(&format!(
            "record=timing_ratio depth={depth} ratio={:.4}",
            medians[0] / medians[1]
        ))?;
    }
    Ok(())
}

fn cmd_depth_sweep(args: DepthSweepArgs) -> Result<(), CliError> {
    let depths = parse_usize_list(&args.depths, "--depths")?;
    for &d in &depths {
        check_depth(d)?;
    }
    check_loop_flags(args.epochs, args.batch)?;
    let mut sink = Sink::open(args.metrics_out.as_deref())?;
    let loaded = load_dataset(&args.train)?;
    let test_loaded = args.test.as_deref().map(load_dataset).transpose()?;
    let (train, test, test_note) = match &test_loaded {
        Some(t) => (
            loaded.data,
            t.data.clone(),
            format!(
                "test_file={} test_sha256={}",
                args.test.as_ref().expect("flag present").display(),
                t.sha256
            ),
        ),
        None => {
            let parts = loaded
                .data
                .split(&[0.8, 0.2], args.seed)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let mut iter = parts.into_iter();
            let tr = iter.next().expect("two split parts");
            let te = iter.next().expect("two split parts");
            (tr, te, "test_frac=0.2".to_string())
        }
    };
    sink.emit(&format!(
        "record=run cmd=depth-sweep seed={} depths={} nu={} lr={} epochs={} batch={} momentum={} inference={} train_file={} train_sha256={} train_examples={} {test_note} test_examples={}",
        args.seed, args.depths, args.nu, args.lr, args.epochs, args.batch, args.momentum,
        args.inference.name(), args.train.display(), loaded.sha256, train.len(), test.len()
    ))?;

    let tau = steps_for(args.epochs, train.len(), args.batch)?;
    for &depth in &depths {
        let config = OptimizerConfig {
            nu: args.nu,
            eta: args.lr,
            tau,
            batch_size: args.batch,
            momentum: args.momentum,
            inference: args.inference.mode(),
            seed: args.seed,
            ..OptimizerConfig::default()
        };
        let axis = build_axis_aligned(&train, depth, args.nu).map_err(greedy_error)?;
        let random =
            build_random_oblique(&train, depth, 20, args.nu, args.seed).map_err(greedy_error)?;
        let co2 = co2_refine(&axis, &train, &config).map_err(greedy_error)?;
        let (sgd_model, _) =
            train_via(AlgoFlag::Sgd, &train, None, &config, &reset_leaves(&axis))?;
        let (ssgd_model, _) =
            train_via(AlgoFlag::Ssgd, &train, None, &config, &reset_leaves(&axis))?;
        let rows: [(&str, &TreeModel); 5] = [
            ("axis", &axis),
            ("random", &random),
            ("co2", &co2),
            ("nongreedy-sgd", &sgd_model),
            ("nongreedy-ssgd", &ssgd_model),
        ];
        for (method, model) in rows {
            let train_acc = accuracy(model, &train).map_err(optimizer_error)?;
            let test_acc = accuracy(model, &test).map_err(optimizer_error)?;
            sink.emit(&format!(
                "record=depth_sweep depth={depth} method={method} train_accuracy={} test_accuracy={}",
                fmt_opt(train_acc),
                fmt_opt(test_acc)
            ))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Timing(args) => cmd_timing(args),
        Command::DepthSweep(args) => cmd_depth_sweep(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let kind = err.kind();
            let _ = err.print();
            return if kind == ErrorKind::DisplayHelp || kind == ErrorKind::DisplayVersion {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
