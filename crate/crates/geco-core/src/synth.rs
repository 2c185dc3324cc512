//! Deterministic synthetic image-pair generation for solver, loss, and
//! trainer tests.
//!
//! Keypoint prototypes are built on a random orthonormal basis derived from
//! `category_seed`: symmetric counterparts share a semantic direction and
//! differ only by opposite-sign geometric components of magnitude
//! `geo_scale`, so the semantic component alone cannot separate them. Patch
//! features add isotropic noise (`noise_sigma`) and, optionally, a
//! high-variance nuisance subspace (`nuisance_sigma` over `nuisance_dims`
//! directions) that a feature adapter can learn to suppress. Placement,
//! occlusion, and noise derive from `seed`; prototypes only from
//! `category_seed`, so pairs with different seeds share one category.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, GridGeometry, Keypoint, PairAnnotation, PatchMask};
use crate::segmentation::{LabelGrid, PartDef, PartSchema};

fn default_grid_rows() -> usize {
    8
}
fn default_grid_cols() -> usize {
    8
}
fn default_patch_size() -> u32 {
    14
}
fn default_geo_scale() -> f64 {
    0.15
}

/// Generator parameters for one synthetic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub n_keypoints: usize,
    /// Disjoint (id, id) links; both ids get mutual symmetric annotations.
    pub symmetry_pairs: Vec<(u32, u32)>,
    pub occlusion_rate: f64,
    /// Isotropic per-channel feature noise.
    pub noise_sigma: f64,
    pub dim: usize,
    /// Drives placement, occlusion, and noise.
    pub seed: u64,
    /// Drives prototypes; shared across a dataset.
    #[serde(default)]
    pub category_seed: u64,
    #[serde(default = "default_grid_rows")]
    pub grid_rows: usize,
    #[serde(default = "default_grid_cols")]
    pub grid_cols: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size_px: u32,
    /// Magnitude of the geometric component separating counterparts.
    #[serde(default = "default_geo_scale")]
    pub geo_scale: f64,
    /// Per-patch nuisance component scale (0 disables the subspace).
    #[serde(default)]
    pub nuisance_sigma: f64,
    #[serde(default)]
    pub nuisance_dims: usize,
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_keypoints == 0 {
            return Err(Error::InvalidConfig("n_keypoints must be >= 1".into()));
        }
        let cells = self.grid_rows * self.grid_cols;
        if self.n_keypoints >= cells {
            return Err(Error::InvalidConfig(format!(
                "{} keypoints do not fit a {}x{} grid with background left over",
                self.n_keypoints, self.grid_rows, self.grid_cols
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::InvalidConfig(
                "occlusion_rate must lie in [0,1]".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.nuisance_sigma < 0.0 || self.geo_scale < 0.0 {
            return Err(Error::InvalidConfig("scales must be nonnegative".into()));
        }
        let mut used = std::collections::BTreeSet::new();
        for &(a, b) in &self.symmetry_pairs {
            if a == b
                || a as usize >= self.n_keypoints
                || b as usize >= self.n_keypoints
                || !used.insert(a)
                || !used.insert(b)
            {
                return Err(Error::InvalidConfig(
                    "symmetry pairs must be disjoint keypoint ids".into(),
                ));
            }
        }
        if self.dim < self.basis_size() {
            return Err(Error::InvalidConfig(format!(
                "dim {} too small: prototype basis needs {} directions",
                self.dim,
                self.basis_size()
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridGeometry {
        GridGeometry {
            rows: self.grid_rows,
            cols: self.grid_cols,
            patch_size_px: self.patch_size_px,
        }
    }

    /// Directions needed: one semantic per pair and per unpaired keypoint,
    /// one geometric per pair, the nuisance block, and the background.
    fn basis_size(&self) -> usize {
        let paired = 2 * self.symmetry_pairs.len();
        let unpaired = self.n_keypoints - paired;
        self.symmetry_pairs.len() * 2 + unpaired + self.nuisance_dims + 1
    }

    /// Same category, different placement/occlusion/noise stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One generated pair: two feature maps plus the matching annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub features_src: FeatureMap,
    pub features_tgt: FeatureMap,
    pub annotation: PairAnnotation,
}

struct CategoryPrototypes {
    keypoints: Array2<f64>,
    background: Array1<f64>,
    nuisance: Array2<f64>,
}

/// Gram-Schmidt over standard-normal draws; deterministic in the rng state.
fn orthonormal_basis(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((count, dim));
    let mut filled = 0;
    while filled < count {
        let mut v: Array1<f64> =
            Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for r in 0..filled {
            let proj = v.dot(&basis.row(r));
            let prev = basis.row(r).to_owned();
            v.zip_mut_with(&prev, |x, b| *x -= proj * b);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-6 {
            continue; // essentially colinear draw, sample again
        }
        basis.row_mut(filled).assign(&(v / norm));
        filled += 1;
    }
    basis
}

fn category_prototypes(spec: &SyntheticPairSpec) -> CategoryPrototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.category_seed);
    let n_pairs = spec.symmetry_pairs.len();
    let paired_ids: std::collections::BTreeSet<u32> = spec
        .symmetry_pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .collect();
    let unpaired: Vec<u32> = (0..spec.n_keypoints as u32)
        .filter(|id| !paired_ids.contains(id))
        .collect();

    let count = spec.basis_size();
    let basis = orthonormal_basis(&mut rng, count, spec.dim);
    // Basis layout: pair semantics, pair geometrics, unpaired semantics,
    // nuisance block, background.
    let sem_at = |p: usize| basis.row(p);
    let geo_at = |p: usize| basis.row(n_pairs + p);
    let unpaired_at = |u: usize| basis.row(2 * n_pairs + u);
    let nuis_start = 2 * n_pairs + unpaired.len();

    let mut keypoints = Array2::<f64>::zeros((spec.n_keypoints, spec.dim));
    for (p, &(a, b)) in spec.symmetry_pairs.iter().enumerate() {
        let sem = sem_at(p);
        let geo = geo_at(p);
        for d in 0..spec.dim {
            keypoints[(a as usize, d)] = sem[d] + spec.geo_scale * geo[d];
            keypoints[(b as usize, d)] = sem[d] - spec.geo_scale * geo[d];
        }
    }
    for (u, &id) in unpaired.iter().enumerate() {
        keypoints.row_mut(id as usize).assign(&unpaired_at(u));
    }
    let mut nuisance = Array2::<f64>::zeros((spec.nuisance_dims, spec.dim));
    for r in 0..spec.nuisance_dims {
        nuisance.row_mut(r).assign(&basis.row(nuis_start + r));
    }
    let background = basis.row(nuis_start + spec.nuisance_dims).to_owned();
    CategoryPrototypes {
        keypoints,
        background,
        nuisance,
    }
}

/// Generates one pair, deterministic in `spec` (bit-identical for equal
/// specs).
pub fn gen_synthetic_pair(spec: &SyntheticPairSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let protos = category_prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_keypoints;
    let grid = spec.grid();
    let cells = grid.patch_count();

    // Draw order is fixed: visibilities, then the two placements, then the
    // two noise sweeps. Every patch draws its noise regardless of content.
    let visible_src: Vec<bool> = (0..n).map(|_| !rng.gen_bool(spec.occlusion_rate)).collect();
    let visible_tgt: Vec<bool> = (0..n).map(|_| !rng.gen_bool(spec.occlusion_rate)).collect();
    let place = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut slots: Vec<usize> = (0..cells).collect();
        for i in (1..cells).rev() {
            let j = rng.gen_range(0..=i);
            slots.swap(i, j);
        }
        slots.truncate(n);
        slots
    };
    let cells_src = place(&mut rng);
    let cells_tgt = place(&mut rng);

    let render = |rng: &mut ChaCha8Rng,
                      placed: &[usize],
                      visible: &[bool]|
     -> (FeatureMap, PatchMask) {
        let mut owner: Vec<Option<usize>> = vec![None; cells];
        for k in 0..n {
            if visible[k] {
                owner[placed[k]] = Some(k);
            }
        }
        let mut values = Vec::with_capacity(cells * spec.dim);
        for patch in 0..cells {
            let base = match owner[patch] {
                Some(k) => protos.keypoints.row(k),
                None => protos.background.view(),
            };
            let mut v: Vec<f64> = base.to_vec();
            for r in 0..spec.nuisance_dims {
                let c: f64 = rng.sample(StandardNormal);
                let dir = protos.nuisance.row(r);
                for d in 0..spec.dim {
                    v[d] += spec.nuisance_sigma * c * dir[d];
                }
            }
            for item in v.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *item += spec.noise_sigma * e;
            }
            values.extend(v);
        }
        let map = FeatureMap::new(grid.rows, grid.cols, spec.dim, grid.patch_size_px, values)
            .expect("generator invariants");
        let bits: Vec<bool> = owner.iter().map(Option::is_some).collect();
        let mask = PatchMask::new(grid.rows, grid.cols, bits).expect("grid checked");
        (map, mask)
    };
    let (features_src, mask_src) = render(&mut rng, &cells_src, &visible_src);
    let (features_tgt, mask_tgt) = render(&mut rng, &cells_tgt, &visible_tgt);

    let mut symmetric_of: Vec<Option<u32>> = vec![None; n];
    for &(a, b) in &spec.symmetry_pairs {
        symmetric_of[a as usize] = Some(b);
        symmetric_of[b as usize] = Some(a);
    }
    let keypoints = |placed: &[usize], visible: &[bool]| -> Vec<Keypoint> {
        (0..n)
            .map(|k| {
                let loc = visible[k].then(|| grid.patch_center_px(placed[k]).expect("in range"));
                Keypoint {
                    id: k as u32,
                    x_px: loc.map(|p| p.0),
                    y_px: loc.map(|p| p.1),
                    visible: visible[k],
                    symmetric_id: symmetric_of[k],
                }
            })
            .collect()
    };
    let width = grid.cols as u32 * grid.patch_size_px;
    let height = grid.rows as u32 * grid.patch_size_px;
    let annotation = PairAnnotation {
        source_id: format!("synth-{}-{}-src", spec.category_seed, spec.seed),
        target_id: format!("synth-{}-{}-tgt", spec.category_seed, spec.seed),
        image_size_src: (width, height),
        image_size_tgt: (width, height),
        keypoints_src: keypoints(&cells_src, &visible_src),
        keypoints_tgt: keypoints(&cells_tgt, &visible_tgt),
        mask_src,
        mask_tgt,
        bbox_src: None,
        bbox_tgt: None,
    };
    annotation.validate()?;
    Ok(SyntheticPair {
        features_src,
        features_tgt,
        annotation,
    })
}

/// Generates one pair per seed, all sharing the spec's category.
pub fn gen_dataset(
    base: &SyntheticPairSpec,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<SyntheticPair>> {
    seeds.map(|s| gen_synthetic_pair(&base.with_seed(s))).collect()
}

/// Part labels for segmentation demos: background is part 0 and keypoint k
/// is part k+1 wherever it is visible.
pub fn part_labels(pair: &SyntheticPair) -> (LabelGrid, LabelGrid) {
    let to_grid = |kps: &[Keypoint], mask: &PatchMask, map: &FeatureMap| {
        let grid = map.grid();
        let mut labels: Vec<Option<u32>> = (0..grid.patch_count())
            .map(|p| (!mask.is_foreground(p)).then_some(0))
            .collect();
        for kp in kps {
            if let Ok(patch) = crate::features::keypoint_to_patch(kp, grid) {
                labels[patch] = Some(kp.id + 1);
            }
        }
        LabelGrid {
            rows: grid.rows,
            cols: grid.cols,
            labels,
        }
    };
    (
        to_grid(
            &pair.annotation.keypoints_src,
            &pair.annotation.mask_src,
            &pair.features_src,
        ),
        to_grid(
            &pair.annotation.keypoints_tgt,
            &pair.annotation.mask_tgt,
            &pair.features_tgt,
        ),
    )
}

/// Part schema matching [`part_labels`].
pub fn part_schema(spec: &SyntheticPairSpec) -> PartSchema {
    let mut symmetric_of: Vec<Option<u32>> = vec![None; spec.n_keypoints];
    for &(a, b) in &spec.symmetry_pairs {
        symmetric_of[a as usize] = Some(b + 1);
        symmetric_of[b as usize] = Some(a + 1);
    }
    let mut parts = vec![PartDef {
        id: 0,
        name: "bkg".into(),
        symmetric_id: None,
    }];
    for k in 0..spec.n_keypoints {
        parts.push(PartDef {
            id: k as u32 + 1,
            name: format!("kp{k}"),
            symmetric_id: symmetric_of[k],
        });
    }
    PartSchema { parts }
}
