//! `geco eval-seg`: fit part centroids on one file list, evaluate nearest-
//! centroid assignment on another, and report the segmentation metrics.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::read_feature_path;
use geco_core::segmentation::{
    centroid_assign, centroid_fit, confusion_normalize, geometric_subset_metrics,
    read_label_grid_path, seg_metrics, ConfusionMatrix, PartSchema, SegMetrics,
};
use rayon::prelude::*;

use crate::pairs::read_seg_list;
use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    /// Fit list: one "features labels" path pair per line.
    #[arg(long)]
    fit_list: PathBuf,

    /// Evaluation list, same line format.
    #[arg(long)]
    eval_list: PathBuf,

    /// Base directory the list paths are relative to.
    #[arg(long, default_value = ".")]
    base_dir: PathBuf,

    /// Part schema (JSON, see PartSchema).
    #[arg(long)]
    parts: PathBuf,

    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct EvalSegReport {
    report: &'static str,
    version: u32,
    out: String,
    parts: usize,
    fit_images: usize,
    eval_images: usize,
    fit_samples: usize,
    eval_patches: u64,
    metrics: SegMetrics,
    geometric: Option<SegMetrics>,
    confusion_counts: Vec<Vec<u64>>,
    confusion_normalized: Vec<Vec<f64>>,
    zero_ground_truth_parts: Vec<u32>,
    part_ids: Vec<u32>,
}

pub fn run(ctx: &Context, args: EvalSegArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.parts).map_err(geco_core::Error::Io)?;
    let schema: PartSchema = serde_json::from_str(&text).map_err(geco_core::Error::Json)?;
    schema.validate()?;
    let part_ids = schema.ids();

    let fit_entries = read_seg_list(&args.fit_list, &args.base_dir)?;
    let eval_entries = read_seg_list(&args.eval_list, &args.base_dir)?;
    let pool = ctx.thread_pool()?;

    // Gather labeled feature vectors for the fit.
    let fit_loaded: Vec<geco_core::Result<Vec<(Vec<f64>, u32)>>> = pool.install(|| {
        fit_entries
            .par_iter()
            .map(|entry| {
                let map = read_feature_path(&entry.features)?;
                let labels = read_label_grid_path(&entry.labels)?;
                if labels.rows != map.rows() || labels.cols != map.cols() {
                    return Err(geco_core::Error::DimensionMismatch(format!(
                        "label grid does not match features for {}",
                        entry.features.display()
                    )));
                }
                Ok(labels
                    .labels
                    .iter()
                    .enumerate()
                    .filter_map(|(p, label)| {
                        label.map(|part| (map.patch(p).to_vec(), part))
                    })
                    .collect())
            })
            .collect()
    });
    let mut samples = Vec::new();
    for loaded in fit_loaded {
        samples.extend(loaded?);
    }
    let centroids = centroid_fit(&samples, &part_ids)?;

    // Assign and accumulate confusion counts per evaluation image.
    let eval_results: Vec<geco_core::Result<Vec<(u32, u32)>>> = pool.install(|| {
        eval_entries
            .par_iter()
            .map(|entry| {
                let map = read_feature_path(&entry.features)?;
                let labels = read_label_grid_path(&entry.labels)?;
                if labels.rows != map.rows() || labels.cols != map.cols() {
                    return Err(geco_core::Error::DimensionMismatch(format!(
                        "label grid does not match features for {}",
                        entry.features.display()
                    )));
                }
                let predicted = centroid_assign(&map, &centroids)?;
                Ok(labels
                    .labels
                    .iter()
                    .zip(predicted)
                    .filter_map(|(gt, pred)| gt.map(|g| (g, pred)))
                    .collect())
            })
            .collect()
    });
    let mut confusion = ConfusionMatrix::new(part_ids.clone())?;
    for result in eval_results {
        for (gt, pred) in result? {
            confusion.record(gt, pred)?;
        }
    }

    let metrics = seg_metrics(&confusion)?;
    let geometric = if schema.geometric_ids().is_empty() {
        None
    } else {
        Some(geometric_subset_metrics(&confusion, &schema)?)
    };
    let normalized = confusion_normalize(&confusion);
    let counts: Vec<Vec<u64>> = confusion
        .counts()
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let norm_rows: Vec<Vec<f64>> = normalized
        .values
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();

    emit(
        &EvalSegReport {
            report: "eval-seg",
            version: 1,
            out: args.out.display().to_string(),
            parts: part_ids.len(),
            fit_images: fit_entries.len(),
            eval_images: eval_entries.len(),
            fit_samples: samples.len(),
            eval_patches: confusion.total(),
            metrics,
            geometric,
            confusion_counts: counts,
            confusion_normalized: norm_rows,
            zero_ground_truth_parts: normalized.zero_ground_truth,
            part_ids,
        },
        Some(&args.out),
    )?;
    Ok(())
}
