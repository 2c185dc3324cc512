//! `geco eval-pck` / `geco eval-pgck`: correspondence evaluation over a pair
//! list, parallel over pairs with order-stable aggregation.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::{read_annotation_path, read_feature_path};
use geco_core::matching::{
    ambiguity_split, evaluate_pair, pgck_decompose, score_records, AmbiguityCounts, MatchRecord,
    NormMode, PgckBreakdown, RadiusMetrics,
};
use rayon::prelude::*;

use crate::pairs::{parse_sweep, read_pair_list};
use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct EvalPckArgs {
    /// Pair list: one "src tgt annotation" path triple per line.
    #[arg(long)]
    pairs: PathBuf,

    /// Base directory the list paths are relative to.
    #[arg(long)]
    features_dir: PathBuf,

    #[arg(long, default_value_t = 0.1)]
    alpha: f64,

    /// Additional radius sweep, start:end:step.
    #[arg(long)]
    sweep: Option<String>,

    /// image or bbox.
    #[arg(long, default_value = "image")]
    norm: String,

    #[arg(long)]
    out: PathBuf,
}

pub type EvalPgckArgs = EvalPckArgs;

#[derive(serde::Serialize)]
struct EvalReport {
    report: &'static str,
    version: u32,
    out: String,
    pairs: usize,
    records: usize,
    alpha: f64,
    norm: String,
    pck: Option<f64>,
    pgck: Option<f64>,
    breakdown: PgckBreakdown,
    ambiguity: Option<AmbiguityCounts>,
    unambiguous_ratio: Option<f64>,
    ambiguous_ratio: Option<f64>,
    symmetric_mismatch_ratio: Option<f64>,
    sweep: Option<Vec<RadiusMetrics>>,
}

fn gather_records(ctx: &Context, args: &EvalPckArgs) -> anyhow::Result<(Vec<MatchRecord>, usize)> {
    let entries = read_pair_list(&args.pairs, &args.features_dir)?;
    let pool = ctx.thread_pool()?;
    let per_pair: Vec<geco_core::Result<Vec<MatchRecord>>> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let xs = read_feature_path(&entry.features_src)?;
                let xt = read_feature_path(&entry.features_tgt)?;
                let ann = read_annotation_path(&entry.annotation)?;
                evaluate_pair(&xs, &xt, &ann)
            })
            .collect()
    });
    let mut records = Vec::new();
    for result in per_pair {
        records.extend(result?);
    }
    Ok((records, entries.len()))
}

fn build_report(
    ctx: &Context,
    args: &EvalPckArgs,
    name: &'static str,
    with_ambiguity: bool,
) -> anyhow::Result<EvalReport> {
    let norm: NormMode = args.norm.parse()?;
    let (records, pairs) = gather_records(ctx, args)?;
    if records.is_empty() {
        return Err(geco_core::Error::NoEvaluablePairs.into());
    }
    let scored = score_records(&records, args.alpha, norm)?;
    let breakdown = pgck_decompose(&scored);
    let ambiguity = if with_ambiguity {
        Some(ambiguity_split(&scored)?)
    } else {
        None
    };
    let sweep = match &args.sweep {
        Some(raw) => Some(radius_table(&records, raw, norm)?),
        None => None,
    };
    Ok(EvalReport {
        report: name,
        version: 1,
        out: args.out.display().to_string(),
        pairs,
        records: records.len(),
        alpha: args.alpha,
        norm: args.norm.clone(),
        pck: breakdown.pck(),
        pgck: breakdown.pgck(),
        breakdown,
        unambiguous_ratio: ambiguity.as_ref().and_then(AmbiguityCounts::unambiguous_ratio),
        ambiguous_ratio: ambiguity.as_ref().and_then(AmbiguityCounts::ambiguous_ratio),
        symmetric_mismatch_ratio: ambiguity
            .as_ref()
            .and_then(AmbiguityCounts::symmetric_mismatch_ratio),
        ambiguity,
        sweep,
    })
}

fn radius_table(
    records: &[MatchRecord],
    raw: &str,
    norm: NormMode,
) -> anyhow::Result<Vec<RadiusMetrics>> {
    let alphas = parse_sweep(raw)?;
    Ok(geco_core::matching::radius_sweep(records, &alphas, norm)?)
}

pub fn run_pck(ctx: &Context, args: EvalPckArgs) -> anyhow::Result<()> {
    let report = build_report(ctx, &args, "eval-pck", false)?;
    emit(&report, Some(&args.out))?;
    Ok(())
}

pub fn run_pgck(ctx: &Context, args: EvalPgckArgs) -> anyhow::Result<()> {
    let report = build_report(ctx, &args, "eval-pgck", true)?;
    emit(&report, Some(&args.out))?;
    Ok(())
}
