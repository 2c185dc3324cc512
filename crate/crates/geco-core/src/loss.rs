//! Correspondence sets, the BCE soft-assignment loss on sparse plan entries,
//! and its analytic gradient with respect to the input features.
//!
//! The gradient is reverse-mode accumulation through the full forward chain:
//! cosine normalization -> score matrix -> the unrolled log-domain Sinkhorn
//! iterations (exactly `cfg.iterations` of them, matching the trained
//! objective) -> BCE loss. The dustbin score `z` is a constant, so bin cells
//! contribute no feature gradient.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{keypoint_to_patch, FeatureMap, GridGeometry, PairAnnotation};
use crate::solver::{
    run_log_sinkhorn, scaling_exponents, Marginals, ScoreMatrix, SolverConfig, SolverMode,
    TransportPlan,
};

/// Log-clamp epsilon: entropic plans are strictly positive in exact
/// arithmetic but can underflow to 0 at f64 after exponentiation.
pub const CLAMP_EPS: f64 = 1e-12;

/// Index pairs into the augmented `(l+1) x (m+1)` plan. Positives pair
/// mutually visible keypoints, bin pairs send singly-visible keypoints to a
/// dustbin, negatives collect mismatched and foreground/background pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrespondenceSets {
    pub positives: Vec<(usize, usize)>,
    pub bins: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl CorrespondenceSets {
    pub fn validate(&self, l: usize, m: usize) -> Result<()> {
        let all = self
            .positives
            .iter()
            .chain(&self.bins)
            .chain(&self.negatives);
        for &(i, j) in all {
            if i > l || j > m {
                return Err(Error::DimensionMismatch(format!(
                    "correspondence ({i},{j}) outside the augmented {}x{} range",
                    l + 1,
                    m + 1
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &pair in self
            .positives
            .iter()
            .chain(&self.bins)
            .chain(&self.negatives)
        {
            if !seen.insert(pair) {
                return Err(Error::InvalidAnnotation(format!(
                    "correspondence {pair:?} appears in more than one set"
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.bins.is_empty() && self.negatives.is_empty()
    }
}

/// Loss weights; the training defaults are 1 (positive), 1 (bin), 10 (negative).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_pos: f64,
    pub w_bin: f64,
    pub w_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pos: 1.0,
            w_bin: 1.0,
            w_neg: 10.0,
        }
    }
}

/// Builds M+/M0/M- from one annotated pair.
///
/// Positives pair the source and target patches of keypoints visible in both
/// images. Keypoints visible on one side only produce a bin pair on that
/// side. Negatives are all cross pairs (source keypoint k, target keypoint
/// k') with differing ids, each visible on its own side (symmetric
/// counterparts included), plus `neg_fg_bg_samples` sampled
/// (foreground, background) patch pairs in each direction. Collisions are
/// removed with priority M+ > M0 > M-.
pub fn build_correspondence_sets(
    ann: &PairAnnotation,
    grid_src: GridGeometry,
    grid_tgt: GridGeometry,
    neg_fg_bg_samples: usize,
    seed: u64,
) -> Result<CorrespondenceSets> {
    ann.validate()?;
    if ann.mask_src.rows() != grid_src.rows || ann.mask_src.cols() != grid_src.cols {
        return Err(Error::DimensionMismatch(
            "source mask does not match the source feature grid".into(),
        ));
    }
    if ann.mask_tgt.rows() != grid_tgt.rows || ann.mask_tgt.cols() != grid_tgt.cols {
        return Err(Error::DimensionMismatch(
            "target mask does not match the target feature grid".into(),
        ));
    }
    let bin_row = grid_src.patch_count();
    let bin_col = grid_tgt.patch_count();

    let mut ids: Vec<u32> = ann.keypoints_src.iter().map(|k| k.id).collect();
    ids.sort_unstable();

    let mut positives = Vec::new();
    let mut bins = Vec::new();
    let mut negatives = Vec::new();
    let mut taken = std::collections::BTreeSet::new();

    let mut src_visible: Vec<(u32, usize)> = Vec::new();
    let mut tgt_visible: Vec<(u32, usize)> = Vec::new();
    for &id in &ids {
        let ks = ann.keypoint_src(id).expect("validated schema");
        let kt = ann.keypoint_tgt(id).expect("validated schema");
        if ks.visible {
            src_visible.push((id, keypoint_to_patch(ks, grid_src)?));
        }
        if kt.visible {
            tgt_visible.push((id, keypoint_to_patch(kt, grid_tgt)?));
        }
        match (ks.visible, kt.visible) {
            (true, true) => {
                let pair = (
                    keypoint_to_patch(ks, grid_src)?,
                    keypoint_to_patch(kt, grid_tgt)?,
                );
                if taken.insert(pair) {
                    positives.push(pair);
                }
            }
            (true, false) => {
                let pair = (keypoint_to_patch(ks, grid_src)?, bin_col);
                if taken.insert(pair) {
                    bins.push(pair);
                }
            }
            (false, true) => {
                let pair = (bin_row, keypoint_to_patch(kt, grid_tgt)?);
                if taken.insert(pair) {
                    bins.push(pair);
                }
            }
            (false, false) => {}
        }
    }

    for &(id_s, patch_s) in &src_visible {
        for &(id_t, patch_t) in &tgt_visible {
            if id_s == id_t {
                continue;
            }
            let pair = (patch_s, patch_t);
            if taken.insert(pair) {
                negatives.push(pair);
            }
        }
    }

    if neg_fg_bg_samples > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fg_src = ann.mask_src.foreground_patches();
        let bg_src = ann.mask_src.background_patches();
        let fg_tgt = ann.mask_tgt.foreground_patches();
        let bg_tgt = ann.mask_tgt.background_patches();
        if !fg_src.is_empty() && !bg_tgt.is_empty() {
            for _ in 0..neg_fg_bg_samples {
                let pair = (
                    fg_src[rng.gen_range(0..fg_src.len())],
                    bg_tgt[rng.gen_range(0..bg_tgt.len())],
                );
                if taken.insert(pair) {
                    negatives.push(pair);
                }
            }
        }
        if !bg_src.is_empty() && !fg_tgt.is_empty() {
            for _ in 0..neg_fg_bg_samples {
                let pair = (
                    bg_src[rng.gen_range(0..bg_src.len())],
                    fg_tgt[rng.gen_range(0..fg_tgt.len())],
                );
                if taken.insert(pair) {
                    negatives.push(pair);
                }
            }
        }
    }

    Ok(CorrespondenceSets {
        positives,
        bins,
        negatives,
    })
}

fn clamped(p: f64) -> Result<f64> {
    if p.is_nan() || p < -CLAMP_EPS {
        return Err(Error::SolverContractViolation(format!(
            "plan entry {p} outside [0,1]"
        )));
    }
    Ok(p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS))
}

/// BCE loss on sparse plan entries:
/// `w_pos * sum(-log P) + w_bin * sum(-log P) + w_neg * sum(-log(1 - P))`.
pub fn bce_ot_loss(plan: &TransportPlan, sets: &CorrespondenceSets, w: &LossWeights) -> Result<f64> {
    let values = plan.values();
    let (n, m) = values.dim();
    sets.validate(n - 1, m - 1)?;
    let mut loss = 0.0;
    for &(i, j) in &sets.positives {
        loss += w.w_pos * -clamped(values[(i, j)])?.ln();
    }
    for &(i, j) in &sets.bins {
        loss += w.w_bin * -clamped(values[(i, j)])?.ln();
    }
    for &(i, j) in &sets.negatives {
        loss += w.w_neg * -(1.0 - clamped(values[(i, j)])?).ln();
    }
    if !loss.is_finite() {
        return Err(Error::SolverContractViolation(format!(
            "loss is not finite: {loss}"
        )));
    }
    Ok(loss)
}

/// Loss value plus gradients with the same shapes as the input feature maps.
#[derive(Debug, Clone)]
pub struct FeatureGradients {
    pub grad_src: Array2<f64>,
    pub grad_tgt: Array2<f64>,
    pub loss: f64,
}

struct NormalizedFeatures {
    units: Array2<f64>,
    norms: Vec<f64>,
}

fn normalize_with_norms(map: &FeatureMap) -> Result<NormalizedFeatures> {
    let mut units = map.matrix().to_owned();
    let mut norms = Vec::with_capacity(map.patch_count());
    for (index, mut row) in units.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroNormPatch { index });
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok(NormalizedFeatures { units, norms })
}

/// Forward loss along the exact pipeline the gradient differentiates:
/// normalize -> scores -> `cfg.iterations` Sinkhorn updates -> BCE.
pub fn ot_bce_loss_forward(
    xs: &FeatureMap,
    xt: &FeatureMap,
    sets: &CorrespondenceSets,
    marg: &Marginals,
    cfg: &SolverConfig,
    mode: SolverMode,
    weights: &LossWeights,
) -> Result<f64> {
    let c = ScoreMatrix::from_features(xs, xt, cfg.z)?;
    let plan = match mode {
        SolverMode::Balanced => crate::solver::sinkhorn_balanced(&c, marg, cfg)?,
        SolverMode::Unbalanced => crate::solver::sinkhorn_unbalanced(&c, marg, cfg)?,
    };
    bce_ot_loss(&plan, sets, weights)
}

/// Analytic gradient of the BCE-OT loss with respect to both feature maps.
///
/// Reverse-mode through the unrolled iterations: the per-iteration softmax
/// weights are reconstructed from the recorded potentials, so memory stays at
/// O(iterations * (l + m)) instead of O(iterations * l * m).
pub fn loss_gradient_wrt_features(
    xs: &FeatureMap,
    xt: &FeatureMap,
    sets: &CorrespondenceSets,
    marg: &Marginals,
    cfg: &SolverConfig,
    mode: SolverMode,
    weights: &LossWeights,
) -> Result<FeatureGradients> {
    cfg.validate()?;
    if xs.dim() != xt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dimensionality differs: {} vs {}",
            xs.dim(),
            xt.dim()
        )));
    }
    let l = xs.patch_count();
    let m = xt.patch_count();
    sets.validate(l, m)?;
    if marg.a().len() != l + 1 || marg.b().len() != m + 1 {
        return Err(Error::DimensionMismatch(
            "marginals do not match the feature grids".into(),
        ));
    }

    // Forward with recorded potentials.
    let src = normalize_with_norms(xs)?;
    let tgt = normalize_with_norms(xt)?;
    let n = l + 1;
    let mm = m + 1;
    let mut chat = Array2::from_elem((n, mm), cfg.z / cfg.lambda);
    let block = src.units.dot(&tgt.units.t());
    chat.slice_mut(ndarray::s![..l, ..m])
        .assign(&block.mapv(|v| v / cfg.lambda));

    let log_a: Vec<f64> = marg
        .a()
        .iter()
        .map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect();
    let log_b: Vec<f64> = marg
        .b()
        .iter()
        .map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect();
    let (phi_a, phi_b) = scaling_exponents(cfg, mode);
    let run = run_log_sinkhorn(
        &chat,
        &log_a,
        &log_b,
        phi_a,
        phi_b,
        cfg.iterations,
        None,
        true,
    )?;

    // Loss and dL/d(log P) on the indexed cells.
    let mut loss = 0.0;
    let mut g_logp = Array2::<f64>::zeros((n, mm));
    {
        let mut visit = |cells: &[(usize, usize)], weight: f64, negative: bool| -> Result<()> {
            for &(i, j) in cells {
                let q = run.log_plan[(i, j)];
                let p = q.exp();
                let pc = clamped(p)?;
                let inside = p > CLAMP_EPS && p < 1.0 - CLAMP_EPS;
                if negative {
                    loss += weight * -(1.0 - pc).ln();
                    if inside {
                        g_logp[(i, j)] += weight * p / (1.0 - p);
                    }
                } else {
                    loss += weight * -pc.ln();
                    if inside {
                        g_logp[(i, j)] -= weight;
                    }
                }
            }
            Ok(())
        };
        visit(&sets.positives, weights.w_pos, false)?;
        visit(&sets.bins, weights.w_bin, false)?;
        visit(&sets.negatives, weights.w_neg, true)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient { stage: "loss" });
    }

    // log P = chat + F (+) G.
    let mut g_chat = g_logp.clone();
    let mut g_f: Vec<f64> = (0..n).map(|i| g_logp.row(i).sum()).collect();
    let mut g_g: Vec<f64> = (0..mm).map(|j| g_logp.column(j).sum()).collect();

    // Reverse sweep over the recorded iterations.
    let iters = run.f_hist.len();
    for t in (0..iters).rev() {
        let f_t = &run.f_hist[t];
        let g_prev = &run.g_hist[t];

        // G^t_j = phi_b * (log b_j - lse_i(chat_ij + F^t_i))
        let mut g_f_from_g = vec![0.0; n];
        for j in 0..mm {
            if g_g[j] == 0.0 || log_b[j] == f64::NEG_INFINITY {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                let v = chat[(i, j)] + f_t[i];
                if v > max {
                    max = v;
                }
            }
            let mut denom = 0.0;
            for i in 0..n {
                denom += (chat[(i, j)] + f_t[i] - max).exp();
            }
            let scale = -phi_b * g_g[j] / denom;
            for i in 0..n {
                let w = (chat[(i, j)] + f_t[i] - max).exp();
                let contrib = scale * w;
                g_chat[(i, j)] += contrib;
                g_f_from_g[i] += contrib;
            }
        }
        for i in 0..n {
            g_f[i] += g_f_from_g[i];
        }

        // F^t_i = phi_a * (log a_i - lse_j(chat_ij + G^{t-1}_j))
        let mut g_g_next = vec![0.0; mm];
        for i in 0..n {
            if g_f[i] == 0.0 || log_a[i] == f64::NEG_INFINITY {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for j in 0..mm {
                let v = chat[(i, j)] + g_prev[j];
                if v > max {
                    max = v;
                }
            }
            let mut denom = 0.0;
            for j in 0..mm {
                denom += (chat[(i, j)] + g_prev[j] - max).exp();
            }
            let scale = -phi_a * g_f[i] / denom;
            for j in 0..mm {
                let w = (chat[(i, j)] + g_prev[j] - max).exp();
                let contrib = scale * w;
                g_chat[(i, j)] += contrib;
                g_g_next[j] += contrib;
            }
        }
        g_g = g_g_next;
        g_f = vec![0.0; n];
    }
    // Whatever remains on g_g attaches to the zero initializer, a constant.

    if g_chat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { stage: "sinkhorn" });
    }

    // dL/dC = dL/dchat / lambda on the non-bin block; bin cells hold the
    // constant z and contribute nothing to the features.
    let mut grad_units_src = Array2::<f64>::zeros((l, xs.dim()));
    let mut grad_units_tgt = Array2::<f64>::zeros((m, xt.dim()));
    for i in 0..l {
        for j in 0..m {
            let g_c = g_chat[(i, j)] / cfg.lambda;
            if g_c == 0.0 {
                continue;
            }
            for d in 0..xs.dim() {
                grad_units_src[(i, d)] += g_c * tgt.units[(j, d)];
                grad_units_tgt[(j, d)] += g_c * src.units[(i, d)];
            }
        }
    }

    // Through the normalization x -> x / |x|.
    let grad_src = backprop_normalization(&grad_units_src, &src)?;
    let grad_tgt = backprop_normalization(&grad_units_tgt, &tgt)?;
    Ok(FeatureGradients {
        grad_src,
        grad_tgt,
        loss,
    })
}

fn backprop_normalization(
    grad_units: &Array2<f64>,
    feats: &NormalizedFeatures,
) -> Result<Array2<f64>> {
    let (rows, dim) = grad_units.dim();
    let mut out = Array2::<f64>::zeros((rows, dim));
    for i in 0..rows {
        let mut dot = 0.0;
        for d in 0..dim {
            dot += grad_units[(i, d)] * feats.units[(i, d)];
        }
        for d in 0..dim {
            out[(i, d)] = (grad_units[(i, d)] - dot * feats.units[(i, d)]) / feats.norms[i];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            stage: "normalization",
        });
    }
    Ok(out)
}

/// Pipeline configuration for pair-level loss evaluation from an annotation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairLossConfig {
    pub solver: SolverConfig,
    pub mode: SolverMode,
    pub weights: LossWeights,
    pub shape_mass: f64,
    pub neg_fg_bg_samples: usize,
    pub seed: u64,
}

impl Default for PairLossConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            mode: SolverMode::Unbalanced,
            weights: LossWeights::default(),
            shape_mass: crate::marginals::DEFAULT_SHAPE_MASS,
            neg_fg_bg_samples: 8,
            seed: 0,
        }
    }
}

/// Derives correspondence sets and mask/visibility marginals from the
/// annotation, then evaluates the loss and feature gradients.
pub fn pair_loss_gradient(
    xs: &FeatureMap,
    xt: &FeatureMap,
    ann: &PairAnnotation,
    plc: &PairLossConfig,
) -> Result<(FeatureGradients, CorrespondenceSets, Marginals)> {
    let sets = build_correspondence_sets(
        ann,
        xs.grid(),
        xt.grid(),
        plc.neg_fg_bg_samples,
        plc.seed,
    )?;
    let spec = crate::marginals::MarginalSpec::new(
        plc.shape_mass,
        crate::marginals::visibility_ratio(&ann.keypoints_src)?,
        crate::marginals::visibility_ratio(&ann.keypoints_tgt)?,
    )?;
    let est = crate::marginals::estimate_marginals(&ann.mask_src, &ann.mask_tgt, &spec)?;
    let grads = loss_gradient_wrt_features(
        xs,
        xt,
        &sets,
        &est.marginals,
        &plc.solver,
        plc.mode,
        &plc.weights,
    )?;
    Ok((grads, sets, est.marginals))
}
