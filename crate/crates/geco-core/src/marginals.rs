//! Marginal construction from patch masks and keypoint visibility.
//!
//! The shape is assigned mass `s` and the background `1 - s`. The visible
//! proportion `x` of the shape (estimated as the ratio of visible keypoints)
//! puts `x*s` on the foreground patches and `(1-x)*s` on the dustbin, so each
//! side sums to `x*s + (1-s) + (1-x)*s = 1` by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Keypoint, PatchMask};
use crate::solver::Marginals;

/// Mass-splitting parameters: shape mass `s` and per-side visible proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub s: f64,
    pub x_src: f64,
    pub x_tgt: f64,
}

pub const DEFAULT_SHAPE_MASS: f64 = 0.9;

impl MarginalSpec {
    pub fn new(s: f64, x_src: f64, x_tgt: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "shape mass s must lie in (0,1), got {s}"
            )));
        }
        for (name, x) in [("x_src", x_src), ("x_tgt", x_tgt)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::InvalidConfig(format!(
                    "visibility ratio {name} must lie in [0,1], got {x}"
                )));
            }
        }
        Ok(Self { s, x_src, x_tgt })
    }
}

/// Degenerate-mask flags raised while estimating marginals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginalWarnings {
    pub empty_foreground_src: bool,
    pub empty_background_src: bool,
    pub empty_foreground_tgt: bool,
    pub empty_background_tgt: bool,
}

impl MarginalWarnings {
    pub fn any(&self) -> bool {
        self.empty_foreground_src
            || self.empty_background_src
            || self.empty_foreground_tgt
            || self.empty_background_tgt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedMarginals {
    pub marginals: Marginals,
    pub warnings: MarginalWarnings,
}

/// Fraction of keypoints that are visible.
pub fn visibility_ratio(kps: &[Keypoint]) -> Result<f64> {
    if kps.is_empty() {
        return Err(Error::EmptyKeypointSchema);
    }
    let visible = kps.iter().filter(|k| k.visible).count();
    Ok(visible as f64 / kps.len() as f64)
}

/// Builds the marginal vectors a (source patches + bin) and b (target
/// patches + bin) from the masks and the visibility proportions in `spec`.
///
/// Degenerate masks fall back with a warning flag: an empty foreground sends
/// the whole shape mass to the bin; an empty background spreads `1 - s`
/// uniformly over the foreground.
pub fn estimate_marginals(
    mask_src: &PatchMask,
    mask_tgt: &PatchMask,
    spec: &MarginalSpec,
) -> Result<EstimatedMarginals> {
    let (a, fg_empty_src, bg_empty_src) = side_marginal(mask_src, spec.x_src, spec.s);
    let (b, fg_empty_tgt, bg_empty_tgt) = side_marginal(mask_tgt, spec.x_tgt, spec.s);
    let warnings = MarginalWarnings {
        empty_foreground_src: fg_empty_src,
        empty_background_src: bg_empty_src,
        empty_foreground_tgt: fg_empty_tgt,
        empty_background_tgt: bg_empty_tgt,
    };
    let marginals = Marginals::new(a, b)?;
    Ok(EstimatedMarginals { marginals, warnings })
}

fn side_marginal(mask: &PatchMask, x: f64, s: f64) -> (Vec<f64>, bool, bool) {
    let n = mask.patch_count();
    let n_fg = (0..n).filter(|&p| mask.is_foreground(p)).count();
    let n_bg = n - n_fg;
    let mut out = vec![0.0; n + 1];

    let fg_mass = x * s;
    let bg_mass = 1.0 - s;
    let mut bin_mass = (1.0 - x) * s;

    let (fg_empty, bg_empty) = (n_fg == 0, n_bg == 0);
    if fg_empty {
        bin_mass += fg_mass;
    }
    let per_fg = if fg_empty {
        0.0
    } else if bg_empty {
        (fg_mass + bg_mass) / n_fg as f64
    } else {
        fg_mass / n_fg as f64
    };
    let per_bg = if bg_empty { 0.0 } else { bg_mass / n_bg as f64 };

    for p in 0..n {
        out[p] = if mask.is_foreground(p) { per_fg } else { per_bg };
    }
    out[n] = bin_mass;
    (out, fg_empty, bg_empty)
}
