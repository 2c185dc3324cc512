//! `geco solve`: one entropic OT solve, plan written in the binary format.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::read_feature_path;
use geco_core::solver::{
    sinkhorn_balanced, sinkhorn_unbalanced, sinkhorn_with_stop, write_plan_path, ScoreMatrix,
    SolverConfig, SolverMode,
};

use crate::cmd_marginals::read_marginal_file;
use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    features_src: PathBuf,

    #[arg(long)]
    features_tgt: PathBuf,

    /// balanced or unbalanced.
    #[arg(long, default_value = "unbalanced")]
    mode: String,

    #[arg(long, default_value_t = 0.1)]
    lambda: f64,

    #[arg(long, default_value_t = 10.0)]
    alpha: f64,

    #[arg(long, default_value_t = 10.0)]
    beta: f64,

    #[arg(long, default_value_t = 10)]
    iters: u32,

    /// Dustbin score.
    #[arg(long, default_value_t = 0.3)]
    z: f64,

    /// Marginal file; uniform marginals when omitted.
    #[arg(long)]
    marginals: Option<PathBuf>,

    /// Stop early once the marginal residual falls below this value.
    #[arg(long)]
    stop_tol: Option<f64>,

    /// Output plan file (binary).
    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct SolveReport {
    report: &'static str,
    version: u32,
    out: String,
    mode: String,
    l: usize,
    m: usize,
    lambda: f64,
    alpha: f64,
    beta: f64,
    iterations_run: u32,
    marginal_residual: f64,
    score_inner_product: f64,
}

pub fn parse_mode(raw: &str) -> geco_core::Result<SolverMode> {
    match raw {
        "balanced" => Ok(SolverMode::Balanced),
        "unbalanced" => Ok(SolverMode::Unbalanced),
        other => Err(geco_core::Error::InvalidConfig(format!(
            "mode must be balanced or unbalanced, got {other:?}"
        ))),
    }
}

pub fn run(_ctx: &Context, args: SolveArgs) -> anyhow::Result<()> {
    let mode = parse_mode(&args.mode)?;
    let xs = read_feature_path(&args.features_src)?;
    let xt = read_feature_path(&args.features_tgt)?;
    let score = ScoreMatrix::from_features(&xs, &xt, args.z)?;
    let marginals = match &args.marginals {
        Some(path) => read_marginal_file(path)?,
        None => geco_core::solver::Marginals::uniform(score.l() + 1, score.m() + 1),
    };
    let cfg = SolverConfig {
        lambda: args.lambda,
        alpha: args.alpha,
        beta: args.beta,
        iterations: args.iters,
        z: args.z,
    };
    let (plan, iterations_run) = match args.stop_tol {
        Some(tol) => sinkhorn_with_stop(&score, &marginals, &cfg, mode, tol)?,
        None => {
            let plan = match mode {
                SolverMode::Balanced => sinkhorn_balanced(&score, &marginals, &cfg)?,
                SolverMode::Unbalanced => sinkhorn_unbalanced(&score, &marginals, &cfg)?,
            };
            (plan, cfg.iterations)
        }
    };
    write_plan_path(&plan, &args.out)?;
    emit(
        &SolveReport {
            report: "solve",
            version: 1,
            out: args.out.display().to_string(),
            mode: mode.to_string(),
            l: score.l(),
            m: score.m(),
            lambda: args.lambda,
            alpha: args.alpha,
            beta: args.beta,
            iterations_run,
            marginal_residual: plan.marginal_residual(&marginals),
            score_inner_product: plan.score_inner_product(&score),
        },
        None,
    )?;
    Ok(())
}
