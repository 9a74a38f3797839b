use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use realmerge_core::{EtaVariant, Method};

mod cmd;

/// Training-free merging of detector checkpoints that share one label space.
#[derive(Debug, Parser)]
#[command(name = "realmerge", version, propagate_version = true)]
struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true, env = "REALMERGE_THREADS")]
    threads: Option<usize>,

    /// Suppress timing lines so that repeated runs print identical output.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

/// Merge hyperparameters. Flags override `--config`, which overrides the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct MergeFlags {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub rank_frac: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// TIES top-p fraction.
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// core-norm | core-over-res-norm
    #[arg(long)]
    pub eta_variant: Option<EtaVariant>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// TIES only: anchor at the average instead of taking the disjoint mean.
    #[arg(long)]
    pub average_anchor: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge specialists fine-tuned from one base into a single archive.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(required = true)]
        specialists: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON merge config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: MergeFlags,
    },
    /// AUC for score files, or a full report for a toy model.
    Eval {
        /// JSON score set, or an array of them.
        #[arg(long, conflicts_with_all = ["model", "data"], required_unless_present = "model")]
        scores: Option<PathBuf>,
        /// Toy archive to score against a protocol directory.
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        /// Directory written by `protocol`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Real / Own-Fake / Other-Fake feature similarity of each specialist
    /// to the averaged model.
    ProbeSim {
        /// JSON protocol config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the synthetic recovery, off-axis, cone and head checks.
    VerifyTheory {
        /// JSON theory config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Noise seed of the synthetic task vectors.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sigma_a: Option<f64>,
        #[arg(long)]
        sigma_z: Option<f64>,
        #[command(flatten)]
        flags: MergeFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train toy specialists, merge them with every configured method and
    /// write archives, reports and tables.
    Protocol {
        /// JSON protocol config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also train one more family and re-merge.
        #[arg(long)]
        incremental: bool,
        /// Add the post-hoc family to an existing output directory without
        /// touching its files.
        #[arg(long, conflicts_with_all = ["config", "seed", "incremental"])]
        remerge: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the tensor index of an archive with per-tensor norms.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = cmd::Context {
        threads: cli.threads,
        deterministic: cli.deterministic,
    };
    let result = match cli.command {
        Command::Merge {
            base,
            specialists,
            out,
            config,
            flags,
        } => cmd::merge(&ctx, &base, &specialists, &out, config.as_deref(), &flags),
        Command::Eval {
            scores,
            model,
            data,
            out,
        } => cmd::eval(
            &ctx,
            scores.as_deref(),
            model.as_deref(),
            data.as_deref(),
            out.as_deref(),
        ),
        Command::ProbeSim { config, seed, out } => {
            cmd::probe_sim(&ctx, config.as_deref(), seed, out.as_deref())
        }
        Command::VerifyTheory {
            config,
            seed,
            sigma_a,
            sigma_z,
            flags,
            out,
        } => cmd::verify_theory(
            &ctx,
            config.as_deref(),
            seed,
            sigma_a,
            sigma_z,
            &flags,
            out.as_deref(),
        ),
        Command::Protocol {
            config,
            seed,
            incremental,
            remerge,
            out,
        } => cmd::protocol(&ctx, config.as_deref(), seed, incremental, remerge, &out),
        Command::Inspect { path } => cmd::inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("realmerge: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
