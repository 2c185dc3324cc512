//! Domain types for patch features, keypoints, masks, and image pairs,
//! plus keypoint-to-patch coordinate mapping and file IO.
//!
//! Keypoints are annotated in pixel coordinates while features live on a
//! patch grid; the bridge is floor division by the patch size with clamping
//! to the grid. All types are immutable after construction.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"GECF";
pub const FEATURE_VERSION: u32 = 1;

/// Hard cap on rows*cols*dim so corrupt headers cannot trigger huge allocations.
const MAX_VALUE_COUNT: u64 = 1 << 31;

/// Patch-grid geometry of one image: grid shape and patch edge length in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub patch_size_px: u32,
}

impl GridGeometry {
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major patch index containing the pixel (x, y), clamped to the grid.
    pub fn patch_index_for_pixel(&self, x_px: f64, y_px: f64) -> usize {
        let ps = f64::from(self.patch_size_px);
        let col = ((x_px / ps).floor() as i64).clamp(0, self.cols as i64 - 1) as usize;
        let row = ((y_px / ps).floor() as i64).clamp(0, self.rows as i64 - 1) as usize;
        row * self.cols + col
    }

    /// Pixel center of a patch: ((col+0.5)*patch_size, (row+0.5)*patch_size).
    pub fn patch_center_px(&self, index: usize) -> Result<(f64, f64)> {
        if index >= self.patch_count() {
            return Err(Error::PatchIndexOutOfRange {
                index,
                count: self.patch_count(),
            });
        }
        let ps = f64::from(self.patch_size_px);
        let row = index / self.cols;
        let col = index % self.cols;
        Ok(((col as f64 + 0.5) * ps, (row as f64 + 0.5) * ps))
    }
}

/// Per-image grid of d-dimensional patch feature vectors.
///
/// Values are stored patch-major as an `(rows*cols) x dim` matrix and are
/// guaranteed finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    dim: usize,
    patch_size_px: u32,
    values: Array2<f64>,
}

impl FeatureMap {
    pub fn new(
        rows: usize,
        cols: usize,
        dim: usize,
        patch_size_px: u32,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 || patch_size_px == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature map dimensions must be positive, got {rows}x{cols}x{dim}, patch {patch_size_px}px"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|p| p.checked_mul(dim))
            .ok_or(Error::DimensionOverflow {
                rows: rows as u64,
                cols: cols as u64,
                dim: dim as u64,
            })?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "expected {expected} values for a {rows}x{cols}x{dim} map, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: "feature map",
                index,
            });
        }
        let values = Array2::from_shape_vec((rows * cols, dim), values)
            .expect("shape checked above");
        Ok(Self {
            rows,
            cols,
            dim,
            patch_size_px,
            values,
        })
    }

    /// Builds a map from an `(patches, dim)` matrix and the grid it belongs to.
    pub fn from_matrix(grid: GridGeometry, dim: usize, values: Array2<f64>) -> Result<Self> {
        let flat = values.into_raw_vec_and_offset().0;
        Self::new(grid.rows, grid.cols, dim, grid.patch_size_px, flat)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size_px(&self) -> u32 {
        self.patch_size_px
    }

    /// Number of patches l = rows*cols.
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn grid(&self) -> GridGeometry {
        GridGeometry {
            rows: self.rows,
            cols: self.cols,
            patch_size_px: self.patch_size_px,
        }
    }

    pub fn patch(&self, index: usize) -> ArrayView1<'_, f64> {
        self.values.row(index)
    }

    /// All patch vectors as a `(patches, dim)` view.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// Returns a copy with every patch vector scaled to unit Euclidean norm.
    ///
    /// Fails with [`Error::ZeroNormPatch`] naming the first patch whose norm
    /// is below 1e-12.
    pub fn l2_normalized(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for (index, mut row) in values.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::ZeroNormPatch { index });
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            dim: self.dim,
            patch_size_px: self.patch_size_px,
            values,
        })
    }
}

/// Maps a visible keypoint to the row-major patch index under the given grid.
pub fn keypoint_to_patch(kp: &Keypoint, grid: GridGeometry) -> Result<usize> {
    let (x, y) = match (kp.visible, kp.x_px, kp.y_px) {
        (true, Some(x), Some(y)) => (x, y),
        _ => return Err(Error::KeypointNotVisible { id: kp.id }),
    };
    Ok(grid.patch_index_for_pixel(x, y))
}

/// One annotated keypoint of an image, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: u32,
    #[serde(rename = "x")]
    pub x_px: Option<f64>,
    #[serde(rename = "y")]
    pub y_px: Option<f64>,
    pub visible: bool,
    pub symmetric_id: Option<u32>,
}

impl Keypoint {
    pub fn location(&self) -> Option<(f64, f64)> {
        match (self.visible, self.x_px, self.y_px) {
            (true, Some(x), Some(y)) => Some((x, y)),
            _ => None,
        }
    }
}

/// Per-patch boolean foreground grid matching a feature map's geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(
                "mask dimensions must be positive".into(),
            ));
        }
        if bits.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {} mask bits for a {rows}x{cols} grid, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_count(&self) -> usize {
        self.bits.len()
    }

    pub fn is_foreground(&self, patch: usize) -> bool {
        self.bits[patch]
    }

    pub fn foreground_patches(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn background_patches(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

impl Serialize for PatchMask {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<String> = (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| if self.bits[r * self.cols + c] { '1' } else { '0' })
                    .collect()
            })
            .collect();
        rows.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PatchMask {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let rows: Vec<String> = Vec::deserialize(de)?;
        if rows.is_empty() {
            return Err(D::Error::custom("mask has no rows"));
        }
        let cols = rows[0].len();
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for row in &rows {
            if row.len() != cols {
                return Err(D::Error::custom("mask rows have unequal lengths"));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    _ => return Err(D::Error::custom(format!("invalid mask character {ch:?}"))),
                }
            }
        }
        PatchMask::new(rows.len(), cols, bits).map_err(D::Error::custom)
    }
}

/// Keypoints, masks, and image sizes for one source/target image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub source_id: String,
    pub target_id: String,
    /// (width_px, height_px)
    pub image_size_src: (u32, u32),
    pub image_size_tgt: (u32, u32),
    pub keypoints_src: Vec<Keypoint>,
    pub keypoints_tgt: Vec<Keypoint>,
    pub mask_src: PatchMask,
    pub mask_tgt: PatchMask,
    /// Optional object bounding box (x, y, w, h) used by bbox-normalized PCK.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_src: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_tgt: Option<[f64; 4]>,
}

impl PairAnnotation {
    /// Checks the structural invariants shared by both keypoint lists.
    pub fn validate(&self) -> Result<()> {
        if self.image_size_src.0 == 0
            || self.image_size_src.1 == 0
            || self.image_size_tgt.0 == 0
            || self.image_size_tgt.1 == 0
        {
            return Err(Error::InvalidAnnotation("image sizes must be positive".into()));
        }
        validate_keypoint_list(&self.keypoints_src, self.image_size_src, "source")?;
        validate_keypoint_list(&self.keypoints_tgt, self.image_size_tgt, "target")?;
        let ids_src: std::collections::BTreeSet<u32> =
            self.keypoints_src.iter().map(|k| k.id).collect();
        let ids_tgt: std::collections::BTreeSet<u32> =
            self.keypoints_tgt.iter().map(|k| k.id).collect();
        if ids_src != ids_tgt {
            return Err(Error::InvalidAnnotation(
                "source and target keypoint schemas differ".into(),
            ));
        }
        Ok(())
    }

    pub fn keypoint_src(&self, id: u32) -> Option<&Keypoint> {
        self.keypoints_src.iter().find(|k| k.id == id)
    }

    pub fn keypoint_tgt(&self, id: u32) -> Option<&Keypoint> {
        self.keypoints_tgt.iter().find(|k| k.id == id)
    }
}

fn validate_keypoint_list(kps: &[Keypoint], size: (u32, u32), side: &str) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for kp in kps {
        if !seen.insert(kp.id) {
            return Err(Error::InvalidAnnotation(format!(
                "duplicate keypoint id {} in {side} list",
                kp.id
            )));
        }
    }
    for kp in kps {
        if kp.visible {
            let (x, y) = match (kp.x_px, kp.y_px) {
                (Some(x), Some(y)) => (x, y),
                _ => {
                    return Err(Error::InvalidAnnotation(format!(
                        "visible keypoint {} in {side} list has no coordinates",
                        kp.id
                    )))
                }
            };
            let (w, h) = (f64::from(size.0), f64::from(size.1));
            if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
                return Err(Error::InvalidAnnotation(format!(
                    "keypoint {} in {side} list lies outside the image bounds",
                    kp.id
                )));
            }
        }
        if let Some(sym) = kp.symmetric_id {
            if sym == kp.id {
                return Err(Error::InvalidAnnotation(format!(
                    "keypoint {} links to itself as symmetric counterpart",
                    kp.id
                )));
            }
            let partner = kps.iter().find(|k| k.id == sym).ok_or_else(|| {
                Error::InvalidAnnotation(format!(
                    "keypoint {} links to unknown symmetric counterpart {sym}",
                    kp.id
                ))
            })?;
            if partner.symmetric_id != Some(kp.id) {
                return Err(Error::InvalidAnnotation(format!(
                    "symmetric link {} -> {sym} is not mutual",
                    kp.id
                )));
            }
        }
    }
    Ok(())
}

// ── File IO ──────────────────────────────────────────────────────────────

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], expected: usize) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::TruncatedPayload {
                expected,
                found: filled,
            });
        }
        filled += n;
    }
    Ok(filled)
}

fn read_u32_le(r: &mut impl Read, expected: usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(r, &mut buf, expected)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes the binary feature format: magic "GECF", u32 version, u32 rows,
/// u32 cols, u32 dim, u32 patch_size_px, then rows*cols*dim f32 values
/// (little-endian, row-major by patch then channel).
pub fn write_feature_file(map: &FeatureMap, w: &mut impl Write) -> Result<()> {
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(map.rows as u32).to_le_bytes())?;
    w.write_all(&(map.cols as u32).to_le_bytes())?;
    w.write_all(&(map.dim as u32).to_le_bytes())?;
    w.write_all(&map.patch_size_px.to_le_bytes())?;
    for v in map.values.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_file(r: &mut impl Read) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, 4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = read_u32_le(r, 8)?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let rows = read_u32_le(r, 12)? as u64;
    let cols = read_u32_le(r, 16)? as u64;
    let dim = read_u32_le(r, 20)? as u64;
    let patch_size_px = read_u32_le(r, 24)?;
    let count = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(dim))
        .filter(|&c| c <= MAX_VALUE_COUNT)
        .ok_or(Error::DimensionOverflow { rows, cols, dim })?;
    let payload = 24 + count as usize * 4;
    let mut bytes = vec![0u8; count as usize * 4];
    read_exact_or_truncated(r, &mut bytes, payload)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    FeatureMap::new(rows as usize, cols as usize, dim as usize, patch_size_px, values)
}

pub fn write_feature_path(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_feature_file(map, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn read_feature_path(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_feature_file(&mut file)
}

/// Writes the annotation as structured JSON with the documented field set.
pub fn write_annotation_path(ann: &PairAnnotation, path: impl AsRef<Path>) -> Result<()> {
    ann.validate()?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, ann)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

pub fn read_annotation_path(path: impl AsRef<Path>) -> Result<PairAnnotation> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ann: PairAnnotation = serde_json::from_reader(file)?;
    ann.validate()?;
    Ok(ann)
}
