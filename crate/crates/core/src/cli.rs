//! The `blco` command line. Modes on the command line are 1-based.
//!
//! Exit codes: 0 success, 2 usage or format error, 3 I/O error, 4 an oracle
//! disagreement.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cpals::{cp_als, write_tsv, CpAlsOptions};
use crate::error::Error;
use crate::exec::{ConflictResolution, ExecConfig};
use crate::format::{
    build_blco_with, deserialize_blco, serialize_blco, BlcoReader, BlcoTensor, BuildOptions,
    DEFAULT_MAX_NNZ_PER_BLOCK, ELEMENT_BYTES,
};
use crate::linearize::DEFAULT_TARGET_BITS;
use crate::mttkrp::{mttkrp_with_stats, resolve_strategy};
use crate::oracle;
use crate::stream::{stream_mttkrp_with, BlockSource, DeviceBudget, StreamOptions};
use crate::tensor::{load_tns, FactorMatrices, SparseTensorCoo};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Relative Frobenius tolerance for oracle comparisons.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "blco", version, about = "BLCO sparse tensors: conversion, MTTKRP and CP-ALS")]
pub struct Cli {
    /// Cap on host worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Auto,
    Register,
    Hierarchical,
}

impl From<StrategyArg> for ConflictResolution {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Auto => ConflictResolution::Auto,
            StrategyArg::Register => ConflictResolution::Register,
            StrategyArg::Hierarchical => ConflictResolution::Hierarchical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Small,
    Full,
}

/// Launch parameters shared by the kernel-running commands.
#[derive(Debug, Clone, clap::Args)]
pub struct LaunchArgs {
    #[arg(long, value_enum, default_value = "auto")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 108)]
    pub compute_units: usize,
    #[arg(long, default_value_t = 4)]
    pub copies: usize,
    #[arg(long, default_value_t = 128)]
    pub wg: usize,
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    #[arg(long, default_value_t = 4)]
    pub coarsen: usize,
    #[arg(long, default_value_t = 32)]
    pub stash_slots: usize,
    /// Commit work-group updates in id order for bit-stable results.
    #[arg(long)]
    pub deterministic: bool,
}

impl LaunchArgs {
    pub fn config(&self) -> ExecConfig {
        ExecConfig {
            workgroup_size: self.wg,
            tile_size: self.tile,
            coarsening: self.coarsen,
            num_compute_units: self.compute_units,
            num_factor_copies: self.copies,
            stash_slots: self.stash_slots,
            deterministic: self.deterministic,
            strategy: self.strategy.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a `.tns` file into a `.blco` container.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_BITS)]
        target_bits: u32,
        #[arg(long, default_value_t = DEFAULT_MAX_NNZ_PER_BLOCK)]
        max_nnz: u64,
        /// Mode lengths, comma separated; inferred from the data otherwise.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<u64>>,
    },
    /// Run MTTKRP with seeded random factors.
    Mttkrp {
        #[arg(long)]
        tensor: PathBuf,
        /// 1-based mode or `all`.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long, default_value_t = 32)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Device memory in bytes; streams blocks from the file.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 2)]
        queues: usize,
        /// Output path; with several modes, `<stem>.mode<n>.<ext>` per mode.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare every result against the element-wise oracle.
        #[arg(long)]
        verify: bool,
        #[command(flatten)]
        launch: LaunchArgs,
    },
    /// Run CP-ALS and export the model.
    Cpals {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, default_value_t = 32)]
        rank: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        launch: LaunchArgs,
    },
    /// Check every mode, strategy and launch configuration against the oracle.
    Verify {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, value_enum, default_value = "small")]
        grid: GridArg,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time MTTKRP per mode; one JSON object per line.
    Bench {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, default_value_t = 25)]
        iters: usize,
        #[arg(long, default_value_t = 32)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        launch: LaunchArgs,
    },
}

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    fn at(path: &Path, err: Error) -> Self {
        let code = if matches!(err, Error::Io(_)) { EXIT_IO } else { EXIT_USAGE };
        CliError { code, message: format!("{}: {err}", path.display()) }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = if matches!(err, Error::Io(_)) { EXIT_IO } else { EXIT_USAGE };
        CliError { code, message: err.to_string() }
    }
}

impl From<io::Error> for CliError {
    fn from(err: io::Error) -> Self {
        CliError { code: EXIT_IO, message: err.to_string() }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> CliResult {
    match cli.threads {
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(&cli.command, out))
        }
        _ => dispatch(&cli.command, out),
    }
}

fn dispatch(command: &Command, out: &mut (dyn Write + Send)) -> CliResult {
    match command {
        Command::Convert { input, output, target_bits, max_nnz, dims } => {
            convert(input, output, *target_bits, *max_nnz, dims.as_deref(), out)
        }
        Command::Mttkrp { tensor, mode, rank, seed, budget, queues, out: dest, verify, launch } => {
            let args = MttkrpArgs {
                mode,
                rank: *rank,
                seed: *seed,
                budget: *budget,
                queues: *queues,
                dest: dest.as_deref(),
                verify: *verify,
                config: launch.config(),
            };
            run_mttkrp(tensor, &args, out)
        }
        Command::Cpals { tensor, rank, iters, tol, seed, out_dir, launch } => {
            let opts = CpAlsOptions {
                rank: *rank,
                max_iters: *iters,
                tol: *tol,
                seed: *seed,
                config: launch.config(),
            };
            run_cpals(tensor, &opts, out_dir, out)
        }
        Command::Verify { tensor, grid, rank, seed } => run_verify(tensor, *grid, *rank, *seed, out),
        Command::Bench { tensor, iters, rank, seed, launch } => {
            run_bench(tensor, *iters, *rank, *seed, &launch.config(), out)
        }
    }
}

fn read_tns(path: &Path, dims: Option<&[u64]>) -> CliResult<SparseTensorCoo> {
    let file = File::open(path).map_err(|e| CliError::at(path, e.into()))?;
    load_tns(BufReader::new(file), dims).map_err(|e| CliError::at(path, e))
}

fn read_blco(path: &Path) -> CliResult<BlcoTensor> {
    let file = File::open(path).map_err(|e| CliError::at(path, e.into()))?;
    deserialize_blco(BufReader::new(file)).map_err(|e| CliError::at(path, e))
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn convert(
    input: &Path,
    output: &Path,
    target_bits: u32,
    max_nnz: u64,
    dims: Option<&[u64]>,
    out: &mut (dyn Write + Send),
) -> CliResult {
    let coo = read_tns(input, dims)?;
    let opts = BuildOptions::new(target_bits, max_nnz);
    let (tensor, t) = build_blco_with(&coo, &opts)?;
    let file = File::create(output).map_err(|e| CliError::at(output, e.into()))?;
    serialize_blco(&tensor, io::BufWriter::new(file)).map_err(|e| CliError::at(output, e))?;
    let layout = tensor.layout();
    let bits: Vec<String> = layout.mode_bits().iter().map(u32::to_string).collect();
    writeln!(out, "blocks: {}", tensor.blocks().len())?;
    writeln!(out, "nnz: {}", tensor.total_nnz())?;
    writeln!(out, "total bits: {}", layout.total_bits())?;
    writeln!(out, "stripped bits: {}", layout.stripped_bits())?;
    writeln!(out, "mode bits: {}", bits.join(","))?;
    writeln!(
        out,
        "timings: sort {:.6}s block {:.6}s reencode {:.6}s batch {:.6}s",
        secs(t.sort),
        secs(t.block),
        secs(t.reencode),
        secs(t.batch)
    )?;
    Ok(())
}

struct MttkrpArgs<'a> {
    mode: &'a str,
    rank: usize,
    seed: u64,
    budget: Option<u64>,
    queues: usize,
    dest: Option<&'a Path>,
    verify: bool,
    config: ExecConfig,
}

/// Parses a 1-based `--mode` into 0-based modes.
pub fn parse_modes(mode: &str, order: usize) -> CliResult<Vec<usize>> {
    if mode == "all" {
        return Ok((0..order).collect());
    }
    match mode.parse::<usize>() {
        Ok(n) if (1..=order).contains(&n) => Ok(vec![n - 1]),
        _ => Err(CliError::usage(format!(
            "--mode must be 1..={order} or all, got {mode:?}"
        ))),
    }
}

/// `<stem>.mode<n>.<ext>` for 1-based `n`.
pub fn mode_output_path(base: &Path, mode: usize) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.mode{}.{}", mode + 1, ext.to_string_lossy()),
        None => format!("{stem}.mode{}", mode + 1),
    };
    base.with_file_name(name)
}

fn strategy_name(s: ConflictResolution) -> &'static str {
    match s {
        ConflictResolution::Auto => "auto",
        ConflictResolution::Register => "register",
        ConflictResolution::Hierarchical => "hierarchical",
    }
}

fn seeded_factors(dims: &[u64], rank: usize, seed: u64) -> CliResult<FactorMatrices> {
    if rank == 0 {
        return Err(CliError::usage("--rank must be at least 1"));
    }
    Ok(FactorMatrices::random(dims, rank, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn gbps(bytes: u64, d: Duration) -> f64 {
    if d.is_zero() {
        0.0
    } else {
        bytes as f64 / d.as_secs_f64() / 1e9
    }
}

fn run_mttkrp(path: &Path, args: &MttkrpArgs<'_>, out: &mut (dyn Write + Send)) -> CliResult {
    args.config.validate()?;
    // With a budget the container is streamed; otherwise it is loaded whole.
    let (dims, tensor) = match args.budget {
        Some(_) => {
            let file = File::open(path).map_err(|e| CliError::at(path, e.into()))?;
            let reader = BlcoReader::new(BufReader::new(file)).map_err(|e| CliError::at(path, e))?;
            (reader.header().dims().to_vec(), None)
        }
        None => {
            let t = read_blco(path)?;
            (t.dims().to_vec(), Some(t))
        }
    };
    let modes = parse_modes(args.mode, dims.len())?;
    let factors = seeded_factors(&dims, args.rank, args.seed)?;
    let reference = if args.verify {
        let coo = match &tensor {
            Some(t) => t.to_coo()?,
            None => read_blco(path)?.to_coo()?,
        };
        Some(coo)
    } else {
        None
    };

    let mut failed = Vec::new();
    for &mode in &modes {
        let start = Instant::now();
        let (m, strategy, bytes) = match (&tensor, args.budget) {
            (Some(t), _) => {
                let run = mttkrp_with_stats(t, &factors, mode, &args.config)?;
                (run.output, run.strategy, t.element_bytes())
            }
            (None, Some(capacity)) => {
                let strategy = resolve_strategy(dims[mode], &args.config);
                let copies = match strategy {
                    ConflictResolution::Hierarchical => args.config.num_factor_copies as u64,
                    _ => 1,
                };
                let pinned = factors.footprint_bytes() + copies * dims[mode] * args.rank as u64 * 8;
                let budget = DeviceBudget::split(capacity, args.queues, pinned)?;
                let run = stream_mttkrp_with(
                    BlockSource::File(path),
                    &factors,
                    mode,
                    &budget,
                    &args.config,
                    &StreamOptions::default(),
                )
                .map_err(|e| CliError::at(path, e))?;
                writeln!(
                    out,
                    "mode {}: streamed {} batches over {} queues, peak {} of {} bytes",
                    mode + 1,
                    run.report.swaps(),
                    budget.num_queues,
                    run.report.peak_resident_bytes,
                    budget.capacity_bytes
                )?;
                (run.output, run.strategy, run.report.bytes_processed)
            }
            (None, None) => unreachable!("tensor is loaded when no budget is given"),
        };
        let elapsed = start.elapsed();
        writeln!(
            out,
            "mode {}: strategy {} time {:.6}s {:.3} GB/s",
            mode + 1,
            strategy_name(strategy),
            secs(elapsed),
            gbps(bytes, elapsed)
        )?;
        if let Some(coo) = &reference {
            let want = oracle::mttkrp_coo(coo, &factors, mode)?;
            let err = m.relative_error(&want);
            let ok = err <= VERIFY_TOLERANCE;
            writeln!(out, "mode {}: verify {} (relative error {err:.3e})", mode + 1, pass(ok))?;
            if !ok {
                failed.push(mode + 1);
            }
        }
        if let Some(dest) = args.dest {
            let target = if modes.len() == 1 { dest.to_path_buf() } else { mode_output_path(dest, mode) };
            write_tsv(&target, &m).map_err(|e| CliError::at(&target, e))?;
        }
    }
    if !failed.is_empty() {
        return Err(CliError {
            code: EXIT_VERIFY,
            message: format!("oracle disagreement in modes {failed:?}"),
        });
    }
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn run_cpals(path: &Path, opts: &CpAlsOptions, out_dir: &Path, out: &mut (dyn Write + Send)) -> CliResult {
    opts.config.validate()?;
    let tensor = read_blco(path)?;
    let start = Instant::now();
    let model = cp_als(&tensor, opts)?;
    let elapsed = start.elapsed();
    for (i, f) in model.fit_history.iter().enumerate() {
        writeln!(out, "iteration {}: fit {f:.10}", i + 1)?;
    }
    writeln!(
        out,
        "final fit {} after {} iterations in {:.3}s",
        model.final_fit().map_or("n/a".to_string(), |f| format!("{f:.10}")),
        model.fit_history.len(),
        secs(elapsed)
    )?;
    model.export(out_dir, opts).map_err(|e| CliError::at(out_dir, e))?;
    Ok(())
}

/// Launch configurations checked by `verify`. The full grid is every
/// combination of work-group size {4, 32, 128}, tile {2, 4, 32}, coarsening
/// {1, 2, 4} and copies {1, 4}; the small grid drops the middle values. A
/// tile larger than its work-group is clamped to the work-group size.
pub fn verify_grid(grid: GridArg) -> Vec<ExecConfig> {
    let (wgs, tiles, coarsen): (&[usize], &[usize], &[usize]) = match grid {
        GridArg::Full => (&[4, 32, 128], &[2, 4, 32], &[1, 2, 4]),
        GridArg::Small => (&[4, 128], &[2, 32], &[1, 4]),
    };
    let mut out = Vec::new();
    for &wg in wgs {
        for &tile in tiles {
            for &k in coarsen {
                for copies in [1, 4] {
                    out.push(ExecConfig {
                        workgroup_size: wg,
                        tile_size: tile.min(wg),
                        coarsening: k,
                        num_factor_copies: copies,
                        ..Default::default()
                    });
                }
            }
        }
    }
    out
}

/// Strategy pair checked for every configuration.
pub const STRATEGIES: [ConflictResolution; 2] = [ConflictResolution::Register, ConflictResolution::Hierarchical];

fn run_verify(path: &Path, grid: GridArg, rank: usize, seed: u64, out: &mut (dyn Write + Send)) -> CliResult {
    let coo = read_tns(path, None)?;
    let factors = seeded_factors(coo.dims(), rank, seed)?;
    let (tensor, _) = build_blco_with(&coo, &BuildOptions::default())?;
    let configs = verify_grid(grid);
    let mut failures = 0usize;
    let mut total = 0usize;
    for mode in 0..coo.order() {
        let want = oracle::mttkrp_coo(&coo, &factors, mode)?;
        if let Ok(explicit) = oracle::mttkrp_explicit(&coo, &factors, mode) {
            let err = explicit.relative_error(&want);
            let ok = err <= VERIFY_TOLERANCE;
            failures += usize::from(!ok);
            total += 1;
            writeln!(out, "mode {} explicit-oracle {} ({err:.3e})", mode + 1, pass(ok))?;
        }
        for strategy in STRATEGIES {
            let mut worst = 0.0f64;
            let mut bad = 0usize;
            for cfg in &configs {
                let cfg = ExecConfig { strategy, ..*cfg };
                let m = crate::mttkrp::mttkrp(&tensor, &factors, mode, &cfg)?;
                let err = m.relative_error(&want);
                worst = worst.max(err);
                if err > VERIFY_TOLERANCE {
                    bad += 1;
                }
            }
            failures += bad;
            total += configs.len();
            writeln!(
                out,
                "mode {} {} {} configs {} (max relative error {worst:.3e})",
                mode + 1,
                strategy_name(strategy),
                configs.len(),
                pass(bad == 0)
            )?;
        }
    }
    writeln!(out, "{} of {total} checks passed", total - failures)?;
    if failures > 0 {
        return Err(CliError {
            code: EXIT_VERIFY,
            message: format!("{failures} checks disagree with the oracle"),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRecord {
    mode: usize,
    strategy: &'static str,
    nnz: u64,
    rank: usize,
    iters: usize,
    mean_s: f64,
    min_s: f64,
    gbps: f64,
}

fn run_bench(
    path: &Path,
    iters: usize,
    rank: usize,
    seed: u64,
    config: &ExecConfig,
    out: &mut (dyn Write + Send),
) -> CliResult {
    config.validate()?;
    let tensor = read_blco(path)?;
    let factors = seeded_factors(tensor.dims(), rank, seed)?;
    for mode in 0..tensor.order() {
        let mut times = Vec::with_capacity(iters);
        let mut strategy = resolve_strategy(tensor.dims()[mode], config);
        if tensor.total_nnz() > 0 {
            for _ in 0..iters {
                let start = Instant::now();
                let run = mttkrp_with_stats(&tensor, &factors, mode, config)?;
                times.push(start.elapsed());
                strategy = run.strategy;
            }
        }
        let (mean, min) = if times.is_empty() {
            (0.0, 0.0)
        } else {
            let total: f64 = times.iter().map(|d| d.as_secs_f64()).sum();
            (total / times.len() as f64, times.iter().min().map_or(0.0, |d| d.as_secs_f64()))
        };
        let bytes = tensor.total_nnz() * ELEMENT_BYTES;
        let rec = BenchRecord {
            mode: mode + 1,
            strategy: strategy_name(strategy),
            nnz: tensor.total_nnz(),
            rank,
            iters: times.len(),
            mean_s: mean,
            min_s: min,
            gbps: if mean > 0.0 { bytes as f64 / mean / 1e9 } else { 0.0 },
        };
        let line = serde_json::to_string(&rec).map_err(|e| CliError::usage(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(parse_modes("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_modes("2", 3).unwrap(), vec![1]);
        for bad in ["0", "4", "x", "-1"] {
            assert_eq!(parse_modes(bad, 3).unwrap_err().code, EXIT_USAGE);
        }
    }

    #[test]
    fn per_mode_paths() {
        assert_eq!(mode_output_path(Path::new("/t/m.tsv"), 0), PathBuf::from("/t/m.mode1.tsv"));
        assert_eq!(mode_output_path(Path::new("m"), 2), PathBuf::from("m.mode3"));
    }

    #[test]
    fn grids_are_valid() {
        let full = verify_grid(GridArg::Full);
        assert_eq!(full.len(), 54);
        assert!(full.iter().all(|c| c.validate().is_ok()));
        assert!(verify_grid(GridArg::Small).iter().all(|c| c.validate().is_ok()));
    }
}
