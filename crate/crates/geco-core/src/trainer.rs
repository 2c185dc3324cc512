//! A small linear feature adapter trained with the OT-BCE loss on synthetic
//! pairs, with gradient flow through the full Sinkhorn pipeline.
//!
//! The adapter is a single d x d map applied to every patch vector of both
//! images before cosine normalization. Plain gradient descent keeps training
//! dependency-free and deterministic; per-pair gradients are accumulated in
//! fixed batch order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{keypoint_to_patch, FeatureMap};
use crate::loss::{
    build_correspondence_sets, loss_gradient_wrt_features, CorrespondenceSets, LossWeights,
};
use crate::marginals::{estimate_marginals, visibility_ratio, MarginalSpec};
use crate::matching::{evaluate_pair, pgck_decompose, score_records, NormMode, PgckBreakdown};
use crate::solver::{sinkhorn_unbalanced, Marginals, ScoreMatrix, SolverConfig, SolverMode};
use crate::synth::{SyntheticPair, SyntheticPairSpec};

pub const ADAPTER_MAGIC: [u8; 4] = *b"GECW";

/// Square linear map applied per patch vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter {
    weight: Array2<f64>,
}

impl LinearAdapter {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
        }
    }

    /// Identity plus Gaussian noise of scale `sigma_init`.
    pub fn random_init(dim: usize, sigma_init: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut weight = Array2::eye(dim);
        for w in weight.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *w += sigma_init * e;
        }
        Self { weight }
    }

    pub fn from_weight(weight: Array2<f64>) -> Result<Self> {
        if weight.nrows() != weight.ncols() {
            return Err(Error::DimensionMismatch(
                "adapter weight must be square".into(),
            ));
        }
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: "adapter weight",
                index: 0,
            });
        }
        Ok(Self { weight })
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> ArrayView2<'_, f64> {
        self.weight.view()
    }

    /// Applies `W x` to every patch vector.
    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        if map.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter dim {} vs feature dim {}",
                self.dim(),
                map.dim()
            )));
        }
        let adapted = map.matrix().dot(&self.weight.t());
        FeatureMap::from_matrix(map.grid(), map.dim(), adapted)
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&ADAPTER_MAGIC)?;
        file.write_all(&(self.dim() as u32).to_le_bytes())?;
        for w in self.weight.iter() {
            file.write_all(&(*w as f32).to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(|_| Error::TruncatedPayload {
            expected: 4,
            found: 0,
        })?;
        if magic != ADAPTER_MAGIC {
            return Err(Error::BadMagic {
                expected: ADAPTER_MAGIC,
                found: magic,
            });
        }
        let mut rest = Vec::new();
        file.read_to_end(&mut rest)?;
        if rest.len() < 4 {
            return Err(Error::TruncatedPayload {
                expected: 8,
                found: rest.len() + 4,
            });
        }
        let dim = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        let expected = 4 + dim * dim * 4;
        if rest.len() != expected {
            return Err(Error::TruncatedPayload {
                expected: expected + 4,
                found: rest.len() + 4,
            });
        }
        let values: Vec<f64> = rest[4..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let weight = Array2::from_shape_vec((dim, dim), values).expect("length checked");
        Self::from_weight(weight)
    }
}

/// Training hyperparameters. The solver block and loss weights default to
/// the training-time values; `mode` defaults to the KL-relaxed solver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_pairs: usize,
    pub sigma_init: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub weights: LossWeights,
    pub mode: SolverMode,
    pub shape_mass: f64,
    pub neg_fg_bg_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.5,
            batch_pairs: 4,
            sigma_init: 0.01,
            seed: 0,
            solver: SolverConfig::default(),
            weights: LossWeights::default(),
            mode: SolverMode::Unbalanced,
            shape_mass: crate::marginals::DEFAULT_SHAPE_MASS,
            neg_fg_bg_samples: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::InvalidConfig("batch_pairs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adapter plus the per-step mean batch loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: LinearAdapter,
    pub loss_trace: Vec<f64>,
}

struct PreparedPair<'a> {
    pair: &'a SyntheticPair,
    sets: CorrespondenceSets,
    marginals: Marginals,
}

fn prepare_pairs<'a>(
    dataset: &'a [SyntheticPair],
    cfg: &TrainConfig,
) -> Result<Vec<PreparedPair<'a>>> {
    dataset
        .iter()
        .enumerate()
        .map(|(idx, pair)| {
            let sets = build_correspondence_sets(
                &pair.annotation,
                pair.features_src.grid(),
                pair.features_tgt.grid(),
                cfg.neg_fg_bg_samples,
                cfg.seed.wrapping_add(idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )?;
            let spec = MarginalSpec::new(
                cfg.shape_mass,
                visibility_ratio(&pair.annotation.keypoints_src)?,
                visibility_ratio(&pair.annotation.keypoints_tgt)?,
            )?;
            let est = estimate_marginals(
                &pair.annotation.mask_src,
                &pair.annotation.mask_tgt,
                &spec,
            )?;
            Ok(PreparedPair {
                pair,
                sets,
                marginals: est.marginals,
            })
        })
        .collect()
}

/// Plain gradient descent on the adapter, deterministic in `cfg.seed`.
pub fn train(dataset: &[SyntheticPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    let dim = dataset[0].features_src.dim();
    let prepared = prepare_pairs(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapter = LinearAdapter::random_init(dim, cfg.sigma_init, &mut rng);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grad_w = Array2::<f64>::zeros((dim, dim));
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_pairs {
            let idx = rng.gen_range(0..prepared.len());
            let item = &prepared[idx];
            let xs = adapter.apply(&item.pair.features_src)?;
            let xt = adapter.apply(&item.pair.features_tgt)?;
            let grads = loss_gradient_wrt_features(
                &xs,
                &xt,
                &item.sets,
                &item.marginals,
                &cfg.solver,
                cfg.mode,
                &cfg.weights,
            )?;
            // y = W x per patch, so dL/dW = sum_p g_y(p) x(p)^T.
            grad_w = grad_w
                + grads.grad_src.t().dot(&item.pair.features_src.matrix())
                + grads.grad_tgt.t().dot(&item.pair.features_tgt.matrix());
            batch_loss += grads.loss;
        }
        let scale = 1.0 / cfg.batch_pairs as f64;
        batch_loss *= scale;
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        trace.push(batch_loss);
        let weight = adapter.weight().to_owned() - grad_w * (cfg.learning_rate * scale);
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        adapter = LinearAdapter::from_weight(weight)?;
    }
    Ok(TrainOutcome {
        adapter,
        loss_trace: trace,
    })
}

/// Matching metrics plus mean dustbin mass of occluded queries, computed on
/// adapter-transformed features.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterEvaluation {
    pub alpha: f64,
    pub breakdown: PgckBreakdown,
    pub pck: Option<f64>,
    pub pgck: Option<f64>,
    pub unambiguous_ratio: Option<f64>,
    pub ambiguous_ratio: Option<f64>,
    pub symmetric_mismatch_ratio: Option<f64>,
    /// Mean transport mass sent to the target dustbin by source keypoints
    /// whose match is occluded; `None` when no query is occluded.
    pub mean_bin_mass: Option<f64>,
}

/// Runs argmax evaluation and the dustbin-mass probe over a dataset.
pub fn evaluate_adapter(
    adapter: &LinearAdapter,
    dataset: &[SyntheticPair],
    alpha: f64,
    solver: &SolverConfig,
    shape_mass: f64,
) -> Result<AdapterEvaluation> {
    let mut records = Vec::new();
    let mut bin_mass_sum = 0.0;
    let mut bin_mass_count = 0u64;
    for pair in dataset {
        let xs = adapter.apply(&pair.features_src)?;
        let xt = adapter.apply(&pair.features_tgt)?;
        records.extend(evaluate_pair(&xs, &xt, &pair.annotation)?);

        // Dustbin mass of source keypoints occluded in the target.
        let occluded: Vec<usize> = pair
            .annotation
            .keypoints_src
            .iter()
            .filter(|k| {
                k.visible
                    && pair
                        .annotation
                        .keypoint_tgt(k.id)
                        .is_some_and(|t| !t.visible)
            })
            .map(|k| keypoint_to_patch(k, xs.grid()).expect("visible"))
            .collect();
        if !occluded.is_empty() {
            let spec = MarginalSpec::new(
                shape_mass,
                visibility_ratio(&pair.annotation.keypoints_src)?,
                visibility_ratio(&pair.annotation.keypoints_tgt)?,
            )?;
            let est = estimate_marginals(
                &pair.annotation.mask_src,
                &pair.annotation.mask_tgt,
                &spec,
            )?;
            let c = ScoreMatrix::from_features(&xs, &xt, solver.z)?;
            let plan = sinkhorn_unbalanced(&c, &est.marginals, solver)?;
            let bin_col = c.bin_col();
            for &patch in &occluded {
                bin_mass_sum += plan.values()[(patch, bin_col)];
                bin_mass_count += 1;
            }
        }
    }
    let scored = score_records(&records, alpha, NormMode::Image)?;
    let breakdown = pgck_decompose(&scored);
    let ambiguity = crate::matching::ambiguity_split(&scored)?;
    Ok(AdapterEvaluation {
        alpha,
        breakdown,
        pck: breakdown.pck(),
        pgck: breakdown.pgck(),
        unambiguous_ratio: ambiguity.unambiguous_ratio(),
        ambiguous_ratio: ambiguity.ambiguous_ratio(),
        symmetric_mismatch_ratio: ambiguity.symmetric_mismatch_ratio(),
        mean_bin_mass: (bin_mass_count > 0).then(|| bin_mass_sum / bin_mass_count as f64),
    })
}

/// The shipped symmetry-ambiguity benchmark: one fixed category with three
/// symmetric keypoint pairs riding on a strong nuisance subspace, and
/// disjoint train/eval seed ranges.
#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub base: SyntheticPairSpec,
    pub train_seeds: std::ops::Range<u64>,
    pub eval_seeds: std::ops::Range<u64>,
}

pub fn ambiguity_benchmark() -> ToyBenchmark {
    ToyBenchmark {
        base: SyntheticPairSpec {
            n_keypoints: 6,
            symmetry_pairs: vec![(0, 1), (2, 3), (4, 5)],
            occlusion_rate: 0.25,
            noise_sigma: 0.05,
            dim: 16,
            seed: 0,
            category_seed: 7,
            grid_rows: 8,
            grid_cols: 8,
            patch_size_px: 14,
            geo_scale: 0.3,
            nuisance_sigma: 0.7,
            nuisance_dims: 4,
        },
        train_seeds: 0..24,
        eval_seeds: 10_000..10_032,
    }
}

impl ToyBenchmark {
    pub fn train_dataset(&self) -> Result<Vec<SyntheticPair>> {
        crate::synth::gen_dataset(&self.base, self.train_seeds.clone())
    }

    pub fn eval_dataset(&self) -> Result<Vec<SyntheticPair>> {
        crate::synth::gen_dataset(&self.base, self.eval_seeds.clone())
    }

    /// Seed ranges must stay disjoint so evaluation never sees training data.
    pub fn seeds_disjoint(&self) -> bool {
        self.train_seeds.end <= self.eval_seeds.start
            || self.eval_seeds.end <= self.train_seeds.start
    }
}
