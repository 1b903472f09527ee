//! Command-line entry point: train, evaluate, generate, export a density
//! grid, and run the trace benchmark.
//!
//! Exit codes: 0 success, 1 user error, 2 numerical failure. Every command
//! honors `--seed` and is reproducible under it. Human-facing floats print
//! with six significant digits; checkpoints keep full precision.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use otcnf::bench::{bench_trace, BenchConfig};
use otcnf::data::sample_latent;
use otcnf::error::Error;
use otcnf::flow::{integrate_forward, integrate_inverse};
use otcnf::linalg::Mat;
use otcnf::metrics::evaluate;
use otcnf::objective::LOG_2PI;
use otcnf::runconfig::{DataSource, RunConfig};
use otcnf::trainer::{train, Checkpoint, CHECKPOINT_VERSION};
use otcnf::Result;

#[derive(Parser)]
#[command(
    name = "otcnf",
    about = "Potential-driven continuous normalizing flow: density estimation and sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow and write checkpoint, training log, and run metadata.
    Train(TrainArgs),
    /// Evaluate a checkpoint: test loss, inverse error, MMD against
    /// generated samples.
    Eval(EvalArgs),
    /// Draw latent samples and map them through the inverse flow.
    Generate(GenerateArgs),
    /// Export estimated log-density values on a regular 2-D grid.
    DensityGrid(DensityGridArgs),
    /// Time the exact trace kernel against Hutchinson estimation.
    BenchTrace(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file (flat key = value text); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Toy data source by name (shorthand for data = toy:<name>).
    #[arg(long)]
    toy: Option<String>,
    /// CSV data source (shorthand for data = csv:<path>).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Output directory for checkpoint, log, and metadata.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hidden width.
    #[arg(long)]
    m: Option<usize>,
    /// Training time steps (validation uses nt_val from the config).
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    nt_val: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trace mode: exact | hutchinson:<K>[:<rademacher|gaussian>].
    #[arg(long)]
    trace: Option<String>,
    /// Extra key = value overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by `train`.
    checkpoint: PathBuf,
    /// Evaluation data: toy:<name> or csv:<path>; defaults to the training
    /// source recorded in the checkpoint's run config.
    #[arg(long)]
    data: Option<String>,
    /// Evaluation time steps; defaults to the checkpoint's nt_val.
    #[arg(long)]
    nt: Option<usize>,
    /// Generated-sample count for the MMD comparison.
    #[arg(long, default_value_t = 100_000)]
    generated: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the report files; defaults next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    checkpoint: PathBuf,
    /// Number of samples to generate.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time steps for the inverse solve; defaults to the checkpoint's nt_val.
    #[arg(long)]
    nt: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DensityGridArgs {
    checkpoint: PathBuf,
    /// Grid bounds in original coordinates: lo:hi applied to both axes.
    #[arg(long, default_value = "-4.5:4.5")]
    bounds: String,
    /// Grid points per axis.
    #[arg(long, default_value_t = 101)]
    resolution: usize,
    #[arg(long)]
    nt: Option<usize>,
    /// Output CSV path (columns x1, x2, log_density).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Dimensions to sweep, comma separated.
    #[arg(long, default_value = "43,63,784")]
    dims: String,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Probe counts for the analytic estimator, comma separated.
    #[arg(long, default_value = "1,4,16,64")]
    probes: String,
    /// Probe counts for the tape-AD estimator, comma separated.
    #[arg(long, default_value = "1")]
    ad_probes: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Generate(args) => cmd_generate(args),
        Command::DensityGrid(args) => cmd_density_grid(args),
        Command::BenchTrace(args) => cmd_bench(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn assemble_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &args.toy {
        config.data = DataSource::Toy(name.clone());
    }
    if let Some(path) = &args.csv {
        config.data = DataSource::Csv(path.clone());
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    macro_rules! over {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    over!(config.train.m, args.m);
    over!(config.train.nt_train, args.nt);
    over!(config.train.nt_val, args.nt_val);
    over!(config.train.alpha1, args.alpha1);
    over!(config.train.alpha2, args.alpha2);
    over!(config.train.lr, args.lr);
    over!(config.train.batch_size, args.batch_size);
    over!(config.train.max_iters, args.max_iters);
    over!(config.train.seed, args.seed);
    if let Some(trace) = &args.trace {
        config.set("trace", trace)?;
    }
    for kv in &args.sets {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set needs KEY=VALUE, got '{kv}'"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config = assemble_config(&args)?;
    config.train.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let data = config.load_data()?;

    println!(
        "training on {} ({} train / {} val / {} test rows, d = {})",
        config.to_key_values().lines().next().unwrap_or(""),
        data.train.rows(),
        data.val.rows(),
        data.test.rows(),
        data.dim()
    );

    let outcome = train(&data, &config.train)?;

    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        params: outcome.params.clone(),
        iteration: outcome.best_iteration,
        best_val_c: outcome.best_val_c,
        mean: data.mean.clone(),
        std: data.std.clone(),
        source: data.source.clone(),
        config: config.train,
    };
    checkpoint.save(&config.out_dir.join("model.ckpt"))?;
    outcome.log.write_csv(&config.out_dir.join("train_log.csv"))?;
    let metadata = serde_json::json!({
        "seed": config.train.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": CHECKPOINT_VERSION,
        "iterations_run": outcome.iterations_run,
        "best_iteration": outcome.best_iteration,
        "best_val_c": outcome.best_val_c,
        "diverged_at": outcome.diverged,
        "config": config.to_key_values(),
    });
    std::fs::write(
        config.out_dir.join("run_metadata.json"),
        serde_json::to_string_pretty(&metadata).expect("metadata serializes"),
    )?;

    if let Some(iter) = outcome.diverged {
        eprintln!(
            "training diverged at iteration {iter}; best checkpoint (iteration {}) kept",
            outcome.best_iteration
        );
        return Ok(ExitCode::from(2));
    }
    println!(
        "done: best validation C {:.6e} at iteration {} ({} iterations run)",
        outcome.best_val_c, outcome.best_iteration, outcome.iterations_run
    );
    Ok(ExitCode::SUCCESS)
}

/// Standardized evaluation data for a checkpoint: the recorded source's test
/// split, or an explicit override.
fn eval_data(checkpoint: &Checkpoint, data: &Option<String>) -> Result<Mat> {
    let mut config = RunConfig::default();
    let spec = data.clone().unwrap_or_else(|| checkpoint.source.clone());
    config.set("data", &spec)?;
    config.train.seed = checkpoint.config.seed;
    let split = config.load_data()?;
    if split.dim() != checkpoint.params.d {
        return Err(Error::Config(format!(
            "checkpoint is {}-dimensional but data has {} columns",
            checkpoint.params.d,
            split.dim()
        )));
    }
    // Evaluation must use the checkpoint's training statistics, not the
    // evaluation split's.
    let raw_test = split.unstandardize(&split.test);
    let mut standardized = raw_test;
    for r in 0..standardized.rows() {
        let row = standardized.row_mut(r);
        for c in 0..row.len() {
            row[c] = (row[c] - checkpoint.mean[c]) / checkpoint.std[c];
        }
    }
    Ok(standardized)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let nt = args.nt.unwrap_or(checkpoint.config.nt_val);
    let test = eval_data(&checkpoint, &args.data)?;
    let report = evaluate(&checkpoint.params, &test, nt, args.generated, args.seed)?;

    let out_dir = args
        .out
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&out_dir)?;
    let jsonl = out_dir.join("eval_report.jsonl");
    let mut existing = std::fs::read_to_string(&jsonl).unwrap_or_default();
    existing.push_str(&report.to_json_line());
    existing.push('\n');
    std::fs::write(&jsonl, existing)?;
    std::fs::write(out_dir.join("eval_summary.txt"), format!("{}\n", report.summary()))?;
    println!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

fn write_csv(path: &Path, header: &str, rows: &Mat) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for r in 0..rows.rows() {
        let line: Vec<String> = rows.row(r).iter().map(|v| format!("{v:.6e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let nt = args.nt.unwrap_or(checkpoint.config.nt_val);
    let d = checkpoint.params.d;
    let latent = sample_latent(args.n, d, args.seed);
    let (standardized, _) = integrate_inverse(&checkpoint.params, &latent, nt, 1.0)?;
    // Undo the training standardization so samples land in data coordinates.
    let mut samples = standardized;
    for r in 0..samples.rows() {
        let row = samples.row_mut(r);
        for c in 0..row.len() {
            row[c] = row[c] * checkpoint.std[c] + checkpoint.mean[c];
        }
    }
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    write_csv(&args.out, &header.join(","), &samples)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_density_grid(args: DensityGridArgs) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let d = checkpoint.params.d;
    if d != 2 {
        return Err(Error::Argument(format!(
            "density grid export is 2-D only; checkpoint has d = {d}"
        )));
    }
    if args.resolution < 2 {
        return Err(Error::Argument("resolution must be at least 2".into()));
    }
    let (lo, hi) = args
        .bounds
        .split_once(':')
        .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)))
        .ok_or_else(|| Error::Argument(format!("bounds '{}' must be lo:hi", args.bounds)))?;
    if !(hi > lo) {
        return Err(Error::Argument("bounds must satisfy lo < hi".into()));
    }
    let nt = args.nt.unwrap_or(checkpoint.config.nt_val);
    let res = args.resolution;
    let step = (hi - lo) / (res - 1) as f64;

    // Grid in original coordinates, standardized for the flow.
    let mut grid = Mat::zeros(res * res, 2);
    for i in 0..res {
        for j in 0..res {
            grid.set(i * res + j, 0, lo + i as f64 * step);
            grid.set(i * res + j, 1, lo + j as f64 * step);
        }
    }
    let mut standardized = grid.clone();
    for r in 0..standardized.rows() {
        let row = standardized.row_mut(r);
        for c in 0..2 {
            row[c] = (row[c] - checkpoint.mean[c]) / checkpoint.std[c];
        }
    }
    let (fwd, _) = integrate_forward(&checkpoint.params, &standardized, nt, 1.0)?;

    // log rho0(x) = log rho1(f(xhat)) + ell(xhat) - sum log std, the last
    // term converting the standardized-space density back to original
    // coordinates.
    let log_std_sum: f64 = checkpoint.std.iter().map(|s| s.ln()).sum();
    let mut out = Mat::zeros(res * res, 3);
    for r in 0..res * res {
        let y = fwd.positions.row(r);
        let sq: f64 = y.iter().map(|v| v * v).sum();
        let log_rho1 = -0.5 * sq - LOG_2PI;
        let logp = log_rho1 + fwd.ell[r] - log_std_sum;
        out.set(r, 0, grid.at(r, 0));
        out.set(r, 1, grid.at(r, 1));
        out.set(r, 2, logp);
    }
    write_csv(&args.out, "x1,x2,log_density", &out)?;
    println!(
        "wrote {} grid rows ({}x{}) to {}",
        res * res,
        res,
        res,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("invalid {what} entry '{s}'")))
        })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let config = BenchConfig {
        dims: parse_usize_list(&args.dims, "dimension")?,
        m: args.m,
        layers: args.layers,
        batch: args.batch,
        reps: args.reps,
        probe_counts: parse_usize_list(&args.probes, "probe count")?,
        ad_probe_counts: parse_usize_list(&args.ad_probes, "probe count")?,
        warmup: 3,
        seed: args.seed,
    };
    let table = bench_trace(&config)?;
    std::fs::write(&args.out, table.to_csv())?;
    print!("{}", table.summary());
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
