//! Centroid clustering of the feature space over annotated parts and the
//! segmentation metrics: accuracy, mIoU, and ground-truth-normalized
//! confusion matrices, plus the restriction to symmetric ("geometric") parts.
//!
//! Part representations are coordinate-wise medians of the labeled feature
//! vectors; patches are assigned to the nearest centroid by Euclidean
//! distance in the raw (unnormalized) feature space.

use ndarray::Array2;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;

pub type PartId = u32;

/// One entry of the part schema; `symmetric_id` marks left/right-paired
/// ("geometric") parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartDef {
    pub id: PartId,
    pub name: String,
    #[serde(default)]
    pub symmetric_id: Option<PartId>,
}

/// Declared parts of a category, background included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSchema {
    pub parts: Vec<PartDef>,
}

impl PartSchema {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for part in &self.parts {
            if !ids.insert(part.id) {
                return Err(Error::InvalidAnnotation(format!(
                    "duplicate part id {}",
                    part.id
                )));
            }
        }
        for part in &self.parts {
            if let Some(sym) = part.symmetric_id {
                if sym == part.id {
                    return Err(Error::InvalidAnnotation(format!(
                        "part {} links to itself",
                        part.id
                    )));
                }
                let partner = self.parts.iter().find(|p| p.id == sym).ok_or_else(|| {
                    Error::InvalidAnnotation(format!(
                        "part {} links to unknown part {sym}",
                        part.id
                    ))
                })?;
                if partner.symmetric_id != Some(part.id) {
                    return Err(Error::InvalidAnnotation(format!(
                        "symmetric link {} -> {sym} is not mutual",
                        part.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<PartId> {
        self.parts.iter().map(|p| p.id).collect()
    }

    /// Ids of parts that have a symmetric counterpart.
    pub fn geometric_ids(&self) -> Vec<PartId> {
        self.parts
            .iter()
            .filter(|p| p.symmetric_id.is_some())
            .map(|p| p.id)
            .collect()
    }
}

/// Per-part median feature vectors, sorted by part id.
#[derive(Debug, Clone, PartialEq)]
pub struct PartCentroids {
    part_ids: Vec<PartId>,
    centroids: Array2<f64>,
}

impl PartCentroids {
    pub fn part_ids(&self) -> &[PartId] {
        &self.part_ids
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroid(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.centroids.row(index)
    }
}

/// Median with the midpoint convention on even counts.
fn median_inplace(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits one coordinate-wise-median centroid per declared part.
///
/// Every id in `parts` must be covered by at least one sample.
pub fn centroid_fit(samples: &[(Vec<f64>, PartId)], parts: &[PartId]) -> Result<PartCentroids> {
    if parts.is_empty() {
        return Err(Error::InvalidConfig("no parts declared".into()));
    }
    let dim = samples
        .first()
        .map(|(v, _)| v.len())
        .ok_or_else(|| Error::InvalidConfig("no samples provided".into()))?;
    if samples.iter().any(|(v, _)| v.len() != dim) {
        return Err(Error::DimensionMismatch(
            "samples have inconsistent dimensionality".into(),
        ));
    }
    let mut part_ids = parts.to_vec();
    part_ids.sort_unstable();
    part_ids.dedup();
    let mut centroids = Array2::zeros((part_ids.len(), dim));
    for (row, &part) in part_ids.iter().enumerate() {
        let members: Vec<&Vec<f64>> = samples
            .iter()
            .filter(|(_, p)| *p == part)
            .map(|(v, _)| v)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyPart { part });
        }
        for d in 0..dim {
            let mut column: Vec<f64> = members.iter().map(|v| v[d]).collect();
            centroids[(row, d)] = median_inplace(&mut column);
        }
    }
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            context: "centroids",
            index: 0,
        });
    }
    Ok(PartCentroids {
        part_ids,
        centroids,
    })
}

/// Assigns every patch to the nearest centroid by Euclidean distance,
/// ties toward the lowest part id.
pub fn centroid_assign(map: &FeatureMap, centroids: &PartCentroids) -> Result<Vec<PartId>> {
    if map.dim() != centroids.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dim {} vs centroid dim {}",
            map.dim(),
            centroids.dim()
        )));
    }
    let mut labels = Vec::with_capacity(map.patch_count());
    for p in 0..map.patch_count() {
        let patch = map.patch(p);
        let mut best = (0usize, f64::INFINITY);
        for (row, _) in centroids.part_ids.iter().enumerate() {
            let mut dist2 = 0.0;
            for (x, c) in patch.iter().zip(centroids.centroid(row)) {
                dist2 += (x - c) * (x - c);
            }
            if dist2 < best.1 {
                best = (row, dist2);
            }
        }
        labels.push(centroids.part_ids[best.0]);
    }
    Ok(labels)
}

/// Raw confusion counts; `counts[(i, j)]` is the number of patches of
/// ground-truth part `part_ids[i]` predicted as part `part_ids[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    part_ids: Vec<PartId>,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(part_ids: Vec<PartId>) -> Result<Self> {
        if part_ids.is_empty() {
            return Err(Error::EmptyConfusionMatrix);
        }
        let mut ids = part_ids;
        ids.sort_unstable();
        ids.dedup();
        let n = ids.len();
        Ok(Self {
            part_ids: ids,
            counts: Array2::zeros((n, n)),
        })
    }

    pub fn from_counts(part_ids: Vec<PartId>, counts: Array2<u64>) -> Result<Self> {
        let mut m = Self::new(part_ids)?;
        if counts.dim() != m.counts.dim() {
            return Err(Error::DimensionMismatch(
                "count matrix does not match the part list".into(),
            ));
        }
        m.counts = counts;
        Ok(m)
    }

    pub fn part_ids(&self) -> &[PartId] {
        &self.part_ids
    }

    pub fn counts(&self) -> ndarray::ArrayView2<'_, u64> {
        self.counts.view()
    }

    fn index_of(&self, part: PartId) -> Option<usize> {
        self.part_ids.binary_search(&part).ok()
    }

    /// Adds one (ground truth, prediction) observation. Labels outside the
    /// declared schema are rejected.
    pub fn record(&mut self, gt: PartId, pred: PartId) -> Result<()> {
        let i = self
            .index_of(gt)
            .ok_or_else(|| Error::InvalidAnnotation(format!("unknown ground-truth part {gt}")))?;
        let j = self
            .index_of(pred)
            .ok_or_else(|| Error::InvalidAnnotation(format!("unknown predicted part {pred}")))?;
        self.counts[(i, j)] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sub-matrix restricted to `keep`, preserving id order.
    pub fn restricted_to(&self, keep: &[PartId]) -> Result<ConfusionMatrix> {
        let rows: Vec<usize> = self
            .part_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| keep.contains(id))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::NoGeometricParts);
        }
        let ids: Vec<PartId> = rows.iter().map(|&i| self.part_ids[i]).collect();
        let n = rows.len();
        let mut counts = Array2::zeros((n, n));
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in rows.iter().enumerate() {
                counts[(a, b)] = self.counts[(i, j)];
            }
        }
        ConfusionMatrix::from_counts(ids, counts)
    }
}

/// Accuracy and mean IoU as exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegMetricsExact {
    pub miou: Ratio<u64>,
    pub acc: Ratio<u64>,
}

/// Accuracy and mean IoU as floats (derived from the exact rationals).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub acc: f64,
}

/// `Acc = sum_i s_ii / sum_ij s_ij`;
/// `mIoU = mean_i s_ii / (sum_j s_ij + sum_j s_ji - s_ii)`,
/// averaging only over parts with nonzero row-plus-column mass.
pub fn seg_metrics_exact(conf: &ConfusionMatrix) -> Result<SegMetricsExact> {
    let n = conf.part_ids.len();
    let total = conf.total();
    if total == 0 {
        return Err(Error::EmptyConfusionMatrix);
    }
    let diag_total: u64 = (0..n).map(|i| conf.counts[(i, i)]).sum();
    let acc = Ratio::new(diag_total, total);

    let mut iou_sum = Ratio::new(0u64, 1u64);
    let mut counted = 0u64;
    for i in 0..n {
        let row: u64 = conf.counts.row(i).iter().sum();
        let col: u64 = conf.counts.column(i).iter().sum();
        let union = row + col - conf.counts[(i, i)];
        if union == 0 {
            continue; // part absent from both axes: excluded from the mean
        }
        iou_sum += Ratio::new(conf.counts[(i, i)], union);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::EmptyConfusionMatrix);
    }
    let miou = iou_sum / Ratio::from_integer(counted);
    Ok(SegMetricsExact { miou, acc })
}

pub fn seg_metrics(conf: &ConfusionMatrix) -> Result<SegMetrics> {
    let exact = seg_metrics_exact(conf)?;
    let to_f64 = |r: Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
    Ok(SegMetrics {
        miou: to_f64(exact.miou),
        acc: to_f64(exact.acc),
    })
}

/// Ground-truth-normalized confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConfusion {
    pub part_ids: Vec<PartId>,
    /// Entry (i, j): fraction of ground-truth part i predicted as j, scaled
    /// so each ground-truth part carries total mass 1/N.
    pub values: Array2<f64>,
    /// Parts with no ground-truth patches; their slice is zeroed.
    pub zero_ground_truth: Vec<PartId>,
}

/// Normalizes each ground-truth part's counts to total mass `1/N`, so the
/// whole matrix sums to 1 when every part has ground-truth support.
pub fn confusion_normalize(conf: &ConfusionMatrix) -> NormalizedConfusion {
    let n = conf.part_ids.len();
    let mut values = Array2::zeros((n, n));
    let mut zero_ground_truth = Vec::new();
    for i in 0..n {
        let gt_total: u64 = conf.counts.row(i).iter().sum();
        if gt_total == 0 {
            zero_ground_truth.push(conf.part_ids[i]);
            continue;
        }
        for j in 0..n {
            values[(i, j)] = conf.counts[(i, j)] as f64 / (gt_total as f64 * n as f64);
        }
    }
    NormalizedConfusion {
        part_ids: conf.part_ids.clone(),
        values,
        zero_ground_truth,
    }
}

/// Metrics restricted to the parts with a symmetric counterpart.
pub fn geometric_subset_metrics(
    conf: &ConfusionMatrix,
    schema: &PartSchema,
) -> Result<SegMetrics> {
    schema.validate()?;
    let geo = schema.geometric_ids();
    if geo.is_empty() {
        return Err(Error::NoGeometricParts);
    }
    let restricted = conf.restricted_to(&geo)?;
    seg_metrics(&restricted)
}

// ── Label grids (per-patch part annotations) ─────────────────────────────

/// Per-patch part labels for one image; `None` marks unlabeled patches,
/// which evaluation skips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<Option<PartId>>,
}

impl LabelGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.labels.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch(format!(
                "label grid {}x{} does not match {} labels",
                self.rows,
                self.cols,
                self.labels.len()
            )));
        }
        Ok(())
    }
}

pub fn write_label_grid_path(grid: &LabelGrid, path: impl AsRef<std::path::Path>) -> Result<()> {
    grid.validate()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, grid)?;
    std::io::Write::write_all(&mut file, b"\n")?;
    std::io::Write::flush(&mut file)?;
    Ok(())
}

pub fn read_label_grid_path(path: impl AsRef<std::path::Path>) -> Result<LabelGrid> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let grid: LabelGrid = serde_json::from_reader(file)?;
    grid.validate()?;
    Ok(grid)
}
