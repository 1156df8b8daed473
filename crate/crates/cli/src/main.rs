mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use commands::{AggregateArgs, DeconvolveArgs, Preset, SampleArgs, Scale, SimulateArgs};
use io::{CliError, CliResult};

const FORMATS: &str = "\
Input matrices are tab-separated with a header row. The signature has one row per gene
(gene id, then one column per cell type); the bulk matrix has one row per gene (gene id,
then one column per sample).

deconvolve writes into --out:
  proportions.csv   sample_id, then one column per cell type
  covariances.json  {cell_types, samples: [{sample_id, matrix}]}, matrix = Cov(estimate)
  intervals.csv     sample_id, cell_type, estimate, std_error, lower, upper
  run_meta.json     options, gene counts, iterations, convergence, warnings

sample reads proportions.csv and covariances.json from --result and writes
draw_NNNN.csv files (same layout as proportions.csv) plus manifest.json with checksums.

aggregate reads a CSV with header draw_index,unit_id,cell_type,p_value and writes
unit_id, cell_type, hit_count, cutoff, called.

Exit codes: 0 success, 1 output failure, 2 invalid input, 3 numerical failure.";

#[derive(Parser)]
#[command(name = "decals", version, about = "Cell-type proportions with per-sample uncertainty")]
#[command(after_long_help = FORMATS)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DECALS_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate proportions and their covariances from bulk expression.
    Deconvolve {
        /// Signature matrix (TSV, genes x cell types).
        #[arg(long)]
        signature: PathBuf,
        /// Bulk expression (TSV, genes x samples).
        #[arg(long)]
        bulk: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Confidence level of the intervals.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Keep the full cell-type covariances instead of thresholding them.
        #[arg(long)]
        dense: bool,
        /// Skip the finite-sample bias correction.
        #[arg(long)]
        no_bias_correction: bool,
        /// Use the genes shared by both inputs instead of requiring identical gene sets.
        #[arg(long)]
        intersect_genes: bool,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        /// Relative change in the covariances that ends the iteration.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Folds for choosing the threshold.
        #[arg(long, default_value_t = 5)]
        cv_folds: usize,
        /// Seed for the fold assignment.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a simulation study and report interval coverage.
    Simulate {
        /// Named study design.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
        /// JSON object whose fields override the scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated methods, overriding the preset.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw proportion sets from a deconvolution result.
    Sample {
        /// Output directory of `deconvolve`.
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count significant draws per (unit, cell type) and call the stable ones.
    Aggregate {
        /// CSV with columns draw_index,unit_id,cell_type,p_value.
        #[arg(long)]
        pvalues: PathBuf,
        #[arg(long)]
        draws: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Fixed hit-count cutoff instead of the binomial rule.
        #[arg(long)]
        cutoff: Option<usize>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Numeric(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Deconvolve {
            signature,
            bulk,
            out,
            level,
            dense,
            no_bias_correction,
            intersect_genes,
            max_iter,
            tol,
            cv_folds,
            seed,
        } => commands::deconvolve(&DeconvolveArgs {
            signature,
            bulk,
            out,
            level,
            dense,
            no_bias_correction,
            intersect_genes,
            max_iter,
            tol,
            cv_folds,
            seed,
        }),
        Command::Simulate {
            preset,
            scale,
            config,
            methods,
            replicates,
            seed,
            out,
        } => commands::simulate(&SimulateArgs {
            preset,
            scale,
            config,
            methods,
            replicates,
            seed,
            out,
        }),
        Command::Sample {
            result,
            draws,
            seed,
            out,
        } => commands::sample(&SampleArgs {
            result,
            draws,
            seed,
            out,
        }),
        Command::Aggregate {
            pvalues,
            draws,
            alpha,
            cutoff,
            out,
        } => commands::aggregate(&AggregateArgs {
            pvalues,
            draws,
            alpha,
            cutoff,
            out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("decals: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
