//! `geco`: dustbin-augmented optimal-transport matching, end to end.
//!
//! Subcommands cover synthetic data generation, marginal estimation,
//! balanced/unbalanced Sinkhorn solves, argmax matching, the OT-BCE loss
//! with gradient checking, toy adapter training, PCK/PGCK and segmentation
//! evaluation, and a solver benchmark. All reports are structured JSON with
//! deterministic field order; all randomness derives from `--seed`
//! (environment fallback `GECO_SEED`).

mod cmd_bench;
mod cmd_eval_pck;
mod cmd_eval_seg;
mod cmd_gen;
mod cmd_loss;
mod cmd_marginals;
mod cmd_match;
mod cmd_solve;
mod cmd_train;
mod pairs;
mod report;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "geco", version, about = "Optimal-transport soft assignment toolkit")]
struct Cli {
    /// Seed for all randomness not pinned by input files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for pair-parallel subcommands (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Report format (only json is defined).
    #[arg(long, global = true, default_value = "json")]
    format: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic feature/annotation pairs from a spec file.
    GenSynth(cmd_gen::GenSynthArgs),
    /// Estimate OT marginals from an annotation's masks and visibility.
    Marginals(cmd_marginals::MarginalsArgs),
    /// Solve the entropic OT problem for a feature pair.
    Solve(cmd_solve::SolveArgs),
    /// Argmax matching for a feature pair.
    Match(cmd_match::MatchArgs),
    /// OT-BCE loss for one generated pair, optionally with a gradient check.
    Loss(cmd_loss::LossArgs),
    /// Train the toy linear adapter on synthetic pairs.
    TrainToy(cmd_train::TrainToyArgs),
    /// PCK evaluation over a pair list.
    EvalPck(cmd_eval_pck::EvalPckArgs),
    /// PCK decomposition and ambiguity subsets over a pair list.
    EvalPgck(cmd_eval_pck::EvalPgckArgs),
    /// Centroid-clustering segmentation evaluation.
    EvalSeg(cmd_eval_seg::EvalSegArgs),
    /// Wall-clock benchmark of the Sinkhorn solver.
    Bench(cmd_bench::BenchArgs),
}

/// Global settings shared by all subcommands.
pub struct Context {
    pub seed: u64,
    pub threads: usize,
}

impl Context {
    pub fn thread_pool(&self) -> anyhow::Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.max(1))
            .build()?)
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, String> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("GECO_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| format!("GECO_SEED is not a valid u64: {raw:?}")),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = resolve_seed(cli.seed).map_err(anyhow::Error::msg)?;
    if cli.format != "json" {
        anyhow::bail!("unsupported report format {:?}", cli.format);
    }
    let ctx = Context {
        seed,
        threads: cli.threads,
    };
    match cli.command {
        Command::GenSynth(args) => cmd_gen::run(&ctx, args),
        Command::Marginals(args) => cmd_marginals::run(&ctx, args),
        Command::Solve(args) => cmd_solve::run(&ctx, args),
        Command::Match(args) => cmd_match::run(&ctx, args),
        Command::Loss(args) => cmd_loss::run(&ctx, args),
        Command::TrainToy(args) => cmd_train::run(&ctx, args),
        Command::EvalPck(args) => cmd_eval_pck::run_pck(&ctx, args),
        Command::EvalPgck(args) => cmd_eval_pck::run_pgck(&ctx, args),
        Command::EvalSeg(args) => cmd_eval_seg::run(&ctx, args),
        Command::Bench(args) => cmd_bench::run(&ctx, args),
    }
}

/// Exit codes: 0 success, 2 usage (from clap), 3 file or format errors,
/// 4 numeric/module errors.
fn exit_code_for(err: &anyhow::Error) -> i32 {
    use geco_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(
            E::Io(_)
            | E::Json(_)
            | E::BadMagic { .. }
            | E::VersionMismatch { .. }
            | E::TruncatedPayload { .. }
            | E::DimensionOverflow { .. },
        ) => 3,
        Some(_) => 4,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some() {
                3
            } else {
                4
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let code = exit_code_for(&err);
        eprintln!(
            "{}",
            serde_json::json!({"error": {"code": code, "message": format!("{err:#}")}})
        );
        std::process::exit(code);
    }
}
