//! `geco marginals`: mask- and visibility-driven marginal estimation.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::read_annotation_path;
use geco_core::marginals::{estimate_marginals, visibility_ratio, MarginalSpec};

use crate::report::{emit, write_report};
use crate::Context;

#[derive(Debug, Args)]
pub struct MarginalsArgs {
    /// Pair annotation (JSON).
    #[arg(long)]
    annotation: PathBuf,

    /// Shape mass assigned to the object (foreground plus bin).
    #[arg(long, default_value_t = 0.9)]
    s: f64,

    /// Output marginal file: {"a": [...], "b": [...]}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct MarginalFile {
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(serde::Serialize)]
struct MarginalsReport {
    report: &'static str,
    version: u32,
    out: String,
    s: f64,
    x_src: f64,
    x_tgt: f64,
    bin_mass_src: f64,
    bin_mass_tgt: f64,
    warnings: geco_core::marginals::MarginalWarnings,
}

pub fn run(_ctx: &Context, args: MarginalsArgs) -> anyhow::Result<()> {
    let ann = read_annotation_path(&args.annotation)?;
    let x_src = visibility_ratio(&ann.keypoints_src)?;
    let x_tgt = visibility_ratio(&ann.keypoints_tgt)?;
    let spec = MarginalSpec::new(args.s, x_src, x_tgt)?;
    let est = estimate_marginals(&ann.mask_src, &ann.mask_tgt, &spec)?;
    let a = est.marginals.a().to_vec();
    let b = est.marginals.b().to_vec();
    let bin_mass_src = *a.last().expect("nonempty");
    let bin_mass_tgt = *b.last().expect("nonempty");
    write_report(&MarginalFile { a, b }, &args.out)?;
    emit(
        &MarginalsReport {
            report: "marginals",
            version: 1,
            out: args.out.display().to_string(),
            s: args.s,
            x_src,
            x_tgt,
            bin_mass_src,
            bin_mass_tgt,
            warnings: est.warnings,
        },
        None,
    )?;
    Ok(())
}

/// Reads a marginal file written by this subcommand.
pub fn read_marginal_file(path: &std::path::Path) -> geco_core::Result<geco_core::solver::Marginals> {
    #[derive(serde::Deserialize)]
    struct Raw {
        a: Vec<f64>,
        b: Vec<f64>,
    }
    let text = std::fs::read_to_string(path)?;
    let raw: Raw = serde_json::from_str(&text)?;
    geco_core::solver::Marginals::new(raw.a, raw.b)
}
