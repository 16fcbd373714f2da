//! Command-line front end: checkpoint containers, decomposition into
//! tensor-structured adapters, parameter counting, self-checks, toy
//! training runs and segmentation metrics.
//!
//! Exit codes: 0 success, 1 verification or numeric failure, 2 malformed
//! input, 3 invalid arguments, 4 undefined metric.

pub mod config;
pub mod container;
pub mod schema;
pub mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lorapt::adapters::{build_lorapt, param_count, tensorize, Adapter, EncoderWeights, Method, TENSOR_NAMES};
use lorapt::segmetrics::{dice, hd95, remove_small_components};
use lorapt::tensor3::{fft_mode3, fnorm};
use lorapt::tinymodel::{run_training, ToyTask, TrainReport};

use config::{ConfigError, ExperimentConfig};
use container::{Container, ContainerError, Dtype};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "TSPT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Failure = 1,
    Malformed = 2,
    InvalidArgs = 3,
    Undefined = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub msg: String,
}

impl CliError {
    pub fn new(exit: Exit, msg: impl Into<String>) -> Self {
        Self { exit, msg: msg.into() }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::new(Exit::Malformed, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(Exit::Malformed, format!("bad config: {e}"))
    }
}

impl From<lorapt::Error> for CliError {
    fn from(e: lorapt::Error) -> Self {
        let exit = match e {
            lorapt::Error::InvalidArgument(_) => Exit::InvalidArgs,
            lorapt::Error::UndefinedMetric(_) => Exit::Undefined,
            lorapt::Error::Numeric(_) | lorapt::Error::Decomposition { .. } => Exit::Failure,
        };
        CliError::new(exit, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            // a closed reader (e.g. `| head`) is not a failure
            return CliError::new(Exit::Ok, "");
        }
        CliError::new(Exit::Failure, format!("I/O error: {e}"))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "lorapt", version, about = "Tensor-structured low-rank adapters: containers, decomposition, checks and toy runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a container and print its array table and metadata.
    Inspect { path: PathBuf },
    /// Write a seeded random checkpoint.
    InitCheckpoint {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Entry standard deviation is `scale / sqrt(d)`.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: Dtype,
    },
    /// Stack a checkpoint's matrices into the w_sa, w_up and w_down tensors.
    Tensorize {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: Dtype,
    },
    /// Split a checkpoint into rank-r principal factors and frozen residuals.
    Decompose {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: Dtype,
    },
    /// Rebuild effective weights from an adapter file.
    Merge {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32")]
        dtype: Dtype,
    },
    /// Print the number of trainable adapter parameters.
    CountParams {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        rank: u64,
    },
    /// Run a seeded self-check suite: tprod, tsvd or grad.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the toy encoder once as configured.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train across a list of ranks and emit CSV.
    RankSweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ranks, e.g. 1,2,4.
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        /// Comma-separated methods; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice and HD95 between two mask containers.
    SegMetrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Remove predicted components smaller than this many mm³ first.
        #[arg(long)]
        postprocess: Option<f64>,
    },
}

/// Applies `TSPT_THREADS` to the global worker pool.
pub fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new(Exit::InvalidArgs, format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // a pool that already exists (e.g. in tests) keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    Exit::Ok as i32
                }
                _ => {
                    let _ = write!(err, "{e}");
                    Exit::InvalidArgs as i32
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => Exit::Ok as i32,
        Err(e) if e.exit == Exit::Ok => Exit::Ok as i32,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.msg);
            e.exit as i32
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Inspect { path } => cmd_inspect(&path, out),
        Command::InitCheckpoint {
            d,
            layers,
            seed,
            scale,
            out: path,
            dtype,
        } => cmd_init_checkpoint(d, layers, seed, scale, &path, dtype, out),
        Command::Tensorize { input, out: path, dtype } => cmd_tensorize(&input, &path, dtype, out),
        Command::Decompose {
            input,
            rank,
            out: path,
            dtype,
        } => cmd_decompose(&input, rank, &path, dtype, out),
        Command::Merge { adapter, out: path, dtype } => cmd_merge(&adapter, &path, dtype, out),
        Command::CountParams { method, d, layers, rank } => cmd_count_params(method, d, layers, rank, out),
        Command::Verify { suite, seed } => cmd_verify(&suite, seed, out),
        Command::TrainToy { config } => cmd_train_toy(&config, out),
        Command::RankSweep {
            config,
            ranks,
            methods,
            out: path,
        } => cmd_rank_sweep(&config, &ranks, &methods, path.as_deref(), out),
        Command::SegMetrics { pred, gt, postprocess } => cmd_seg_metrics(&pred, &gt, postprocess, out, err),
    }
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> CliResult {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(Exit::Malformed, format!("{}: {e}", path.display())))?;
    let (header, payload) = container::parse_header(&bytes)?;
    writeln!(
        out,
        "{}: {} arrays, header {} bytes, payload {} bytes",
        path.display(),
        header.arrays.len(),
        bytes.len() - payload.len() - 16,
        payload.len()
    )?;
    for e in &header.arrays {
        let shape: Vec<String> = e.shape.iter().map(|n| n.to_string()).collect();
        writeln!(
            out,
            "  {:<20} {:<4} [{}] offset={} nbytes={}",
            e.name,
            e.dtype.name(),
            shape.join(", "),
            e.offset,
            e.nbytes
        )?;
    }
    writeln!(out, "meta: {}", serde_json::Value::Object(header.meta))?;
    Ok(())
}

fn check_dims(d: usize, layers: usize) -> CliResult {
    if d == 0 || layers == 0 {
        return Err(CliError::new(Exit::InvalidArgs, "d and layers must be positive"));
    }
    Ok(())
}

fn cmd_init_checkpoint(
    d: usize,
    layers: usize,
    seed: u64,
    scale: f64,
    path: &Path,
    dtype: Dtype,
    out: &mut dyn Write,
) -> CliResult {
    check_dims(d, layers)?;
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(CliError::new(Exit::InvalidArgs, "scale must be finite and nonnegative"));
    }
    let w = EncoderWeights::random(d, layers, scale, seed);
    schema::weights_to_container(&w, dtype, &[])?.write(path)?;
    writeln!(out, "wrote {} ({} layers, d = {d})", path.display(), layers)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> CliResult<(EncoderWeights, Vec<container::Array>)> {
    Ok(schema::weights_from_container(&Container::read(path)?)?)
}

fn cmd_tensorize(input: &Path, path: &Path, dtype: Dtype, out: &mut dyn Write) -> CliResult {
    let (w, _) = read_checkpoint(input)?;
    let s = tensorize(&w)?;
    schema::stacked_to_container(&s, dtype)?.write(path)?;
    for (name, t) in TENSOR_NAMES.iter().zip(s.tensors()) {
        let (n1, n2, n3) = t.shape();
        writeln!(out, "{name}: {n1}x{n2}x{n3}")?;
    }
    Ok(())
}

fn cmd_decompose(input: &Path, rank: usize, path: &Path, dtype: Dtype, out: &mut dyn Write) -> CliResult {
    let (w, extras) = read_checkpoint(input)?;
    let d = w.d();
    if rank == 0 || rank > d {
        return Err(CliError::new(Exit::InvalidArgs, format!("rank {rank} out of range 1..={d}")));
    }
    let stacked = tensorize(&w)?;
    let adapter = build_lorapt(&stacked, rank)?;
    for ((name, t), sp) in TENSOR_NAMES.iter().zip(stacked.tensors()).zip(adapter.splits()) {
        // the principal tubes in the Fourier domain are the kept singular values
        let fs = fft_mode3(&sp.principal.s)?;
        let n3 = t.n3();
        let leading = (0..n3).map(|k| fs.get(0, 0, k).re).fold(f64::NEG_INFINITY, f64::max);
        let smallest = (0..n3).map(|k| fs.get(rank - 1, rank - 1, k).re).fold(f64::INFINITY, f64::min);
        let total = fnorm(t).powi(2);
        let retained = if total > 0.0 { 1.0 - fnorm(sp.residual()).powi(2) / total } else { 1.0 };
        let (n1, n2, _) = t.shape();
        writeln!(
            out,
            "{name}: {n1}x{n2}x{n3} sigma_1_max={leading:.6e} sigma_{rank}_min={smallest:.6e} retained_energy={retained:.6}"
        )?;
    }
    let count = param_count(Method::LoraPt, d as u64, w.num_layers() as u64, rank as u64);
    debug_assert_eq!(count as usize, adapter.trainable_len());
    schema::adapter_to_container(&adapter, dtype, &extras)?.write(path)?;
    writeln!(out, "trainable parameters: {count}")?;
    Ok(())
}

fn cmd_merge(adapter: &Path, path: &Path, dtype: Dtype, out: &mut dyn Write) -> CliResult {
    let (a, extras) = schema::adapter_from_container(&Container::read(adapter)?)?;
    let w = a
        .effective_weights()
        .map_err(|e| CliError::new(Exit::Malformed, format!("cannot rebuild weights: {e}")))?;
    schema::weights_to_container(&w, dtype, &extras)?.write(path)?;
    writeln!(out, "wrote {} ({} layers, d = {})", path.display(), w.num_layers(), w.d())?;
    Ok(())
}

fn cmd_count_params(method: Method, d: u64, layers: u64, rank: u64, out: &mut dyn Write) -> CliResult {
    if d == 0 || layers == 0 || rank == 0 {
        return Err(CliError::new(Exit::InvalidArgs, "d, layers and rank must be positive"));
    }
    if rank > d {
        return Err(CliError::new(Exit::InvalidArgs, format!("rank {rank} exceeds d = {d}")));
    }
    writeln!(out, "{}", param_count(method, d, layers, rank))?;
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64, out: &mut dyn Write) -> CliResult {
    let checks = verify::run_suite(suite, seed)?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {} max_err={:.3e} tol={:.1e}", c.name, c.worst, c.tol)?;
        failed += !c.passed as usize;
    }
    if failed > 0 {
        return Err(CliError::new(
            Exit::Failure,
            format!("{failed} of {} properties failed in suite {suite} (seed {seed})", checks.len()),
        ));
    }
    writeln!(out, "suite {suite}: all {} properties passed (seed {seed})", checks.len())?;
    Ok(())
}

/// One seeded training run as configured.
pub fn train_once(cfg: &ExperimentConfig, method: Method, rank: usize) -> CliResult<TrainReport> {
    if rank == 0 || rank > cfg.model.d {
        return Err(CliError::new(
            Exit::InvalidArgs,
            format!("rank {rank} out of range 1..={}", cfg.model.d),
        ));
    }
    let task = ToyTask::generate(cfg.model, cfg.n_samples, cfg.train.seed)?;
    let mut adapter = Adapter::build(method, &task.base, rank, cfg.train.seed)?;
    let mut aux = task.aux.clone();
    let rep = run_training(&task, &mut adapter, &mut aux, &cfg.train)?;
    Ok(rep)
}

fn cmd_train_toy(config: &Path, out: &mut dyn Write) -> CliResult {
    let cfg = ExperimentConfig::load(config)?;
    if cfg.rank > cfg.model.d {
        return Err(CliError::new(
            Exit::Malformed,
            format!("bad config: rank {} exceeds d = {}", cfg.rank, cfg.model.d),
        ));
    }
    let rep = train_once(&cfg, cfg.method, cfg.rank)?;
    let params = param_count(cfg.method, cfg.model.d as u64, cfg.model.layers as u64, cfg.rank as u64);
    writeln!(
        out,
        "method={} rank={} task={} steps={} seed={}",
        cfg.method.name(),
        cfg.rank,
        cfg.model.task.name(),
        cfg.train.total_iters,
        cfg.train.seed
    )?;
    writeln!(out, "params={params} trainable_total={}", rep.trainable_params)?;
    writeln!(out, "initial_loss={:?} final_loss={:?}", rep.initial_loss, rep.final_loss)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepRow<'a> {
    method: &'a str,
    rank: usize,
    params: u64,
    final_loss: f64,
    seed: u64,
}

fn cmd_rank_sweep(
    config: &Path,
    ranks: &[usize],
    methods: &[Method],
    csv_path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = ExperimentConfig::load(config)?;
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0 || r > cfg.model.d) {
        return Err(CliError::new(
            Exit::InvalidArgs,
            format!("rank {bad} out of range 1..={}", cfg.model.d),
        ));
    }
    let methods = if methods.is_empty() { vec![cfg.method] } else { methods.to_vec() };
    let mut buf = csv::Writer::from_writer(Vec::new());
    for &m in &methods {
        for &r in ranks {
            let rep = train_once(&cfg, m, r)?;
            buf.serialize(SweepRow {
                method: m.name(),
                rank: r,
                params: param_count(m, cfg.model.d as u64, cfg.model.layers as u64, r as u64),
                final_loss: rep.final_loss,
                seed: cfg.train.seed,
            })
            .map_err(|e| CliError::new(Exit::Failure, e.to_string()))?;
        }
    }
    let bytes = buf.into_inner().map_err(|e| CliError::new(Exit::Failure, e.to_string()))?;
    match csv_path {
        Some(p) => std::fs::write(p, &bytes)?,
        None => out.write_all(&bytes)?,
    }
    Ok(())
}

fn cmd_seg_metrics(
    pred: &Path,
    gt: &Path,
    postprocess: Option<f64>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    let mut p = schema::mask_from_container(&Container::read(pred)?)?;
    let g = schema::mask_from_container(&Container::read(gt)?)?;
    if p.dims() != g.dims() || p.spacing() != g.spacing() {
        return Err(CliError::new(
            Exit::Malformed,
            format!(
                "masks differ: dims {:?} vs {:?}, spacing {:?} vs {:?}",
                p.dims(),
                g.dims(),
                p.spacing(),
                g.spacing()
            ),
        ));
    }
    if let Some(thr) = postprocess {
        if !(thr.is_finite() && thr >= 0.0) {
            return Err(CliError::new(Exit::InvalidArgs, "postprocess threshold must be a nonnegative number"));
        }
        p = remove_small_components(&p, thr);
    }
    let dv = dice(&p, &g)?;
    match hd95(&p, &g) {
        Ok(h) => {
            writeln!(out, "dice={dv:?} hd95={h:?}")?;
            Ok(())
        }
        Err(e) => {
            writeln!(out, "dice={dv:?} hd95=undefined")?;
            let _ = writeln!(err, "note: {e}");
            Err(CliError::from(e))
        }
    }
}
