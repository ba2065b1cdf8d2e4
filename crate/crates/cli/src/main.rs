//! `saes-svd` command-line tool: generate, compress, evaluate, sweep and
//! self-check layer stacks.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use saes_svd::aces::aces_select_beta;
use saes_svd::model_io::{load_calib, load_model, save_calib, save_model, write_atomic};
use saes_svd::oracle::run_selftest;
use saes_svd::pipeline::{beta_sweep, fmt_f64, stats_at_layer, sweep_to_csv, CoefficientBounds};
use saes_svd::synth::{random_calibration, random_model};
use saes_svd::{compress_model, evaluate, Activation, CompressionConfig, Error, Objective, RankPolicy};

#[derive(Parser)]
#[command(name = "saes-svd", version, about = "Cumulative-error-aware low-rank layer compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress every layer of a dense model and write a per-layer report.
    Compress(CompressArgs),
    /// Compare a compressed model against its dense reference.
    Eval(EvalArgs),
    /// Scan the alignment weight for one layer.
    Sweep(SweepArgs),
    /// Run the brute-force oracle battery.
    Selftest(SelftestArgs),
    /// Write a random dense model and calibration set.
    Gen(GenArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Uniform compression ratio in [0, 1).
    #[arg(long, conflicts_with = "ranks")]
    ratio: Option<f64>,
    /// Comma-separated per-layer ranks.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    /// Ridge relative to the mean diagonal of H.
    #[arg(long, default_value_t = 1e-6)]
    lambda_rel: f64,
    #[arg(long, default_value_t = 0.25)]
    alpha_min: f64,
    #[arg(long, default_value_t = 0.75)]
    alpha_max: f64,
    #[arg(long, default_value_t = 0.95)]
    beta_cap: f64,
    #[arg(long, default_value_t = 1.0)]
    shrink: f64,
    #[arg(long, default_value = "ratio")]
    objective: Objective,
    /// Use this α on every layer instead of adaptive selection.
    #[arg(long)]
    fixed_alpha: Option<f64>,
    #[arg(long, default_value_t = 512)]
    batch_tokens: usize,
}

impl ConfigArgs {
    fn config(&self) -> CompressionConfig {
        let ranks = match (&self.ranks, self.ratio) {
            (Some(r), _) => RankPolicy::Explicit(r.clone()),
            (None, Some(ratio)) => RankPolicy::Ratio(ratio),
            (None, None) => CompressionConfig::default().ranks,
        };
        CompressionConfig {
            ranks,
            ridge_rel: self.lambda_rel,
            bounds: CoefficientBounds::Alpha {
                min: self.alpha_min,
                max: self.alpha_max,
            },
            beta_cap: self.beta_cap,
            shrink: self.shrink,
            objective: self.objective,
            fixed_alpha: self.fixed_alpha,
            batch_tokens: self.batch_tokens,
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Held-out tokens for the fidelity columns; defaults to the last 10% of
    /// the calibration file.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Accepted for reproducible invocations; compression itself draws no
    /// random numbers.
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dense reference model.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    batch_tokens: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// 1-based layer index.
    #[arg(long)]
    layer: usize,
    /// Rank for the swept layer; defaults to the configured rank.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 101)]
    grid: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SelftestArgs {
    /// Random candidates per dominance instance.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    layers: usize,
    /// One width for every boundary, or `layers + 1` comma-separated widths.
    #[arg(long, value_delimiter = ',', required = true)]
    dim: Vec<usize>,
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    #[arg(long)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_calib: PathBuf,
}

/// Invalid flag values or combinations detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Configuration errors are usage errors; everything else is runtime.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::ConfigInvalid(_) | Error::RankOutOfRange { .. } => usage(e.to_string()),
        other => other.into(),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let cfg = args.config.config();
    cfg.validate().map_err(classify)?;
    let model = load_model(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let calib = load_calib(&args.calib).with_context(|| format!("reading {}", args.calib.display()))?;
    let (train, held_out) = match &args.eval {
        Some(path) => (calib, load_calib(path).with_context(|| format!("reading {}", path.display()))?),
        None => calib.split_holdout(0.1),
    };
    let (compressed, mut report) = compress_model(&model, &train, &cfg).map_err(classify)?;
    if held_out.n_tokens() > 0 {
        let metrics = evaluate(&model, &compressed, &held_out, cfg.batch_tokens)?;
        report.apply_eval(&metrics);
    }
    save_model(&args.out, &compressed).with_context(|| format!("writing {}", args.out.display()))?;
    emit(Some(&args.report), &report.to_csv())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.batch_tokens == 0 {
        return Err(usage("--batch-tokens must be positive"));
    }
    let reference = load_model(&args.reference).with_context(|| format!("reading {}", args.reference.display()))?;
    let model = load_model(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let calib = load_calib(&args.calib).with_context(|| format!("reading {}", args.calib.display()))?;
    let metrics = evaluate(&reference, &model, &calib, args.batch_tokens)?;
    let mut csv = String::from("layer,cos_sim,frob_rel_err\n");
    for i in 1..metrics.cos_sim.len() {
        let _ = writeln!(
            csv,
            "{i},{},{}",
            fmt_f64(metrics.cos_sim[i]),
            fmt_f64(metrics.frob_rel_err[i])
        );
    }
    emit(args.out.as_deref(), &csv)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.config.config();
    cfg.validate().map_err(classify)?;
    if args.grid < 2 {
        return Err(usage("--grid must be at least 2"));
    }
    let model = load_model(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let calib = load_calib(&args.calib).with_context(|| format!("reading {}", args.calib.display()))?;
    if args.layer == 0 || args.layer > model.layers.len() {
        return Err(usage(format!(
            "--layer {} out of range 1..={}",
            args.layer,
            model.layers.len()
        )));
    }
    let (w, stats, configured) = stats_at_layer(&model, &calib, &cfg, args.layer).map_err(classify)?;
    let r = args.rank.unwrap_or(configured);
    let max = w.nrows().min(w.ncols());
    if r == 0 || r > max {
        return Err(usage(format!("--rank {r} out of range 1..={max}")));
    }
    let points = beta_sweep(&w, &stats, r, args.grid, cfg.ridge_rel)?;
    let (selection, _) = aces_select_beta(&w, &stats, r, cfg.ridge_rel, &cfg.guardrails())?;
    emit(args.out.as_deref(), &sweep_to_csv(&points, selection.beta_star))
}

fn cmd_selftest(args: SelftestArgs) -> Result<bool> {
    let results = run_selftest(args.trials as usize, args.seed);
    let mut table = format!("{:<24} {:<6} {:>20}  detail\n", "check", "status", "seed");
    for r in &results {
        let _ = writeln!(
            table,
            "{:<24} {:<6} {:>20}  {}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.seed,
            r.detail
        );
    }
    print!("{table}");
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (seed {})", r.name, r.seed))
        .collect();
    if failed.is_empty() {
        Ok(true)
    } else {
        eprintln!("error: selftest failed: {}", failed.join(", "));
        Ok(false)
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    if args.layers == 0 || args.tokens == 0 {
        return Err(usage("--layers and --tokens must be positive"));
    }
    let dims = match args.dim.as_slice() {
        [d] => vec![*d; args.layers + 1],
        list if list.len() == args.layers + 1 => list.to_vec(),
        list => {
            return Err(usage(format!(
                "--dim needs 1 or {} widths, got {}",
                args.layers + 1,
                list.len()
            )))
        }
    };
    if dims.contains(&0) {
        return Err(usage("--dim widths must be positive"));
    }
    let model = random_model(&dims, args.activation, args.seed);
    // Separate stream so model and tokens are not built from the same draws.
    let calib = random_calibration(dims[0], args.tokens, args.seed ^ 0x9e37_79b9_7f4a_7c15);
    save_model(&args.out_model, &model).with_context(|| format!("writing {}", args.out_model.display()))?;
    save_calib(&args.out_calib, &calib).with_context(|| format!("writing {}", args.out_calib.display()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Compress(a) => cmd_compress(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Selftest(a) => cmd_selftest(a),
        Command::Gen(a) => cmd_gen(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
