//! `geco match`: argmax matching, per keypoint when an annotation is given,
//! per patch otherwise.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::{read_annotation_path, read_feature_path};
use geco_core::matching::{argmax_match, evaluate_pair, MatchRecord};

use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    features_src: PathBuf,

    #[arg(long)]
    features_tgt: PathBuf,

    /// With an annotation, matches are per evaluable keypoint; without,
    /// every source patch is matched densely.
    #[arg(long)]
    annotation: Option<PathBuf>,

    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct DenseMatch {
    source_patch: usize,
    target_patch: usize,
    similarity: f64,
    pred_px: (f64, f64),
}

#[derive(serde::Serialize)]
struct MatchReport {
    report: &'static str,
    version: u32,
    out: String,
    mode: &'static str,
    keypoint_matches: Option<Vec<MatchRecord>>,
    dense_matches: Option<Vec<DenseMatch>>,
}

pub fn run(_ctx: &Context, args: MatchArgs) -> anyhow::Result<()> {
    let xs = read_feature_path(&args.features_src)?;
    let xt = read_feature_path(&args.features_tgt)?;
    let report = match &args.annotation {
        Some(path) => {
            let ann = read_annotation_path(path)?;
            let records = evaluate_pair(&xs, &xt, &ann)?;
            MatchReport {
                report: "match",
                version: 1,
                out: args.out.display().to_string(),
                mode: "keypoints",
                keypoint_matches: Some(records),
                dense_matches: None,
            }
        }
        None => {
            let grid_tgt = xt.grid();
            let mut dense = Vec::with_capacity(xs.patch_count());
            for p in 0..xs.patch_count() {
                let (j, similarity) = argmax_match(&xs, &xt, p)?;
                dense.push(DenseMatch {
                    source_patch: p,
                    target_patch: j,
                    similarity,
                    pred_px: grid_tgt.patch_center_px(j)?,
                });
            }
            MatchReport {
                report: "match",
                version: 1,
                out: args.out.display().to_string(),
                mode: "dense",
                keypoint_matches: None,
                dense_matches: Some(dense),
            }
        }
    };
    emit(&report, Some(&args.out))?;
    Ok(())
}
