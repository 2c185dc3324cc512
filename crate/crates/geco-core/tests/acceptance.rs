//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured margins once its assertions hold.

use geco_core::exact::{enumerate_uniform_square, exact_ot_oracle, transport_simplex};
use geco_core::features::{FeatureMap, PatchMask};
use geco_core::loss::{
    loss_gradient_wrt_features, ot_bce_loss_forward, CorrespondenceSets, LossWeights,
};
use geco_core::marginals::{estimate_marginals, MarginalSpec};
use geco_core::matching::{
    ambiguity_split, pgck_decompose, score_records, AmbiguityClass, MatchRecord, NormMode,
    PgckRecord, QuerySplit,
};
use geco_core::segmentation::{
    centroid_assign, centroid_fit, confusion_normalize, seg_metrics_exact, ConfusionMatrix,
};
use geco_core::solver::{
    sinkhorn_balanced, sinkhorn_unbalanced, Marginals, ScoreMatrix, SolverConfig, SolverMode,
};
use geco_core::trainer::{
    ambiguity_benchmark, evaluate_adapter, train, LinearAdapter, TrainConfig,
};
use ndarray::Array2;
use num_rational::Ratio;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_simplex(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

fn random_score(rng: &mut ChaCha8Rng, l: usize, m: usize, z: f64) -> ScoreMatrix {
    let mut values = Array2::from_elem((l + 1, m + 1), z);
    for i in 0..l {
        for j in 0..m {
            values[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    ScoreMatrix::from_raw(values, z).unwrap()
}

/// Assignment-structured square instance: one dominant score per source
/// patch along a random permutation, low scores elsewhere; see the matching
/// problem the solver exists for. Paired with uniform marginals this is the
/// regime where a fixed small-lambda iteration budget converges.
fn assignment_score(rng: &mut ChaCha8Rng, n_patches: usize, z: f64) -> ScoreMatrix {
    let mut values = Array2::from_elem((n_patches + 1, n_patches + 1), z);
    for i in 0..n_patches {
        for j in 0..n_patches {
            values[(i, j)] = rng.gen_range(-0.9..0.1);
        }
    }
    let mut targets: Vec<usize> = (0..n_patches).collect();
    for i in 0..n_patches {
        let k = rng.gen_range(0..targets.len());
        let j = targets.swap_remove(k);
        values[(i, j)] = rng.gen_range(0.6..0.95);
    }
    ScoreMatrix::from_raw(values, z).unwrap()
}

#[test]
fn exact_ot_convergence() {
    let start = std::time::Instant::now();
    let mut worst_gap: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=4usize);
        let c = assignment_score(&mut rng, n, 0.3);
        let marg = Marginals::uniform(n + 1, n + 1);
        let (lp_value, _) = exact_ot_oracle(&c, &marg).unwrap();

        // The oracle must agree exactly with an independent enumeration on
        // these square uniform-marginal instances.
        let mass = 1.0 / (n + 1) as f64;
        let (enum_value, _) = enumerate_uniform_square(&c.values().to_owned(), mass);
        assert_eq!(
            lp_value, enum_value,
            "seed {seed}: oracle {lp_value} vs enumeration {enum_value}"
        );
        // And the simplex route agrees with the enumeration route.
        let (simplex_value, _) =
            transport_simplex(&c.values().to_owned(), marg.a(), marg.b()).unwrap();
        assert!((simplex_value - enum_value).abs() < 1e-9);

        let cfg = SolverConfig {
            lambda: 1e-3,
            iterations: 2000,
            ..SolverConfig::default()
        };
        let plan = sinkhorn_balanced(&c, &marg, &cfg).unwrap();
        let gap = (plan.score_inner_product(&c) - lp_value).abs();
        assert!(gap < 1e-3, "seed {seed}: entropic gap {gap}");
        worst_gap = worst_gap.max(gap);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "criterion took {elapsed:?}");
    println!(
        "[PASS] exact-OT convergence: 50 instances, worst |<P,C>-LP| = {worst_gap:.2e} (< 1e-3), \
         oracle == enumeration exactly, runtime {elapsed:?} (< 10 s)"
    );
}

#[test]
fn marginal_feasibility() {
    let checkpoints = [10u32, 50, 200, 500];
    let mut worst_final: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let l = 19; // 20x20 including the dustbin
        let c = random_score(&mut rng, l, l, 0.3);
        let marg = Marginals::new(
            random_simplex(&mut rng, l + 1),
            random_simplex(&mut rng, l + 1),
        )
        .unwrap();
        let mut last = f64::INFINITY;
        let mut final_residual = f64::INFINITY;
        for &iters in &checkpoints {
            let cfg = SolverConfig {
                iterations: iters,
                ..SolverConfig::default()
            };
            let plan = sinkhorn_balanced(&c, &marg, &cfg).unwrap();
            let residual = plan.marginal_residual(&marg);
            assert!(
                residual <= last,
                "seed {seed}: residual rose from {last} to {residual} at {iters} iterations"
            );
            last = residual;
            final_residual = residual;
        }
        assert!(
            final_residual < 1e-6,
            "seed {seed}: residual {final_residual} after 500 iterations"
        );
        worst_final = worst_final.max(final_residual);
    }
    println!(
        "[PASS] marginal feasibility: 10 random 20x20 instances, residual monotone over \
         {checkpoints:?}, worst final residual {worst_final:.2e} (< 1e-6)"
    );
}

#[test]
fn unbalanced_limit() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let l = 4; // 5x5 including the dustbin
        let c = random_score(&mut rng, l, l, 0.3);
        let marg = Marginals::new(
            random_simplex(&mut rng, l + 1),
            random_simplex(&mut rng, l + 1),
        )
        .unwrap();
        let cfg = SolverConfig {
            alpha: 1e6,
            beta: 1e6,
            iterations: 500,
            ..SolverConfig::default()
        };
        let balanced = sinkhorn_balanced(&c, &marg, &cfg).unwrap();
        let unbalanced = sinkhorn_unbalanced(&c, &marg, &cfg).unwrap();
        let max_abs = balanced
            .values()
            .iter()
            .zip(unbalanced.values().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_abs < 1e-4, "seed {seed}: max-abs gap {max_abs}");
        worst = worst.max(max_abs);
    }
    println!(
        "[PASS] unbalanced limit: alpha=beta=1e6 matches balanced on 20 instances, \
         worst max-abs {worst:.2e} (< 1e-4)"
    );
}

fn random_map(rng: &mut ChaCha8Rng, patches: usize, dim: usize) -> FeatureMap {
    let values: Vec<f64> = (0..patches * dim)
        .map(|_| rng.gen_range(-1.0..1.0) + 1.5 * f64::from(u8::from(rng.gen_bool(0.5))))
        .collect();
    FeatureMap::new(1, patches, dim, 14, values).unwrap()
}

fn random_sets(rng: &mut ChaCha8Rng, l: usize, m: usize) -> CorrespondenceSets {
    let mut taken = std::collections::BTreeSet::new();
    let mut sets = CorrespondenceSets::default();
    for _ in 0..rng.gen_range(1..=3) {
        let pair = (rng.gen_range(0..l), rng.gen_range(0..m));
        if taken.insert(pair) {
            sets.positives.push(pair);
        }
    }
    if rng.gen_bool(0.7) {
        let pair = (rng.gen_range(0..l), m);
        if taken.insert(pair) {
            sets.bins.push(pair);
        }
    }
    if rng.gen_bool(0.5) {
        let pair = (l, rng.gen_range(0..m));
        if taken.insert(pair) {
            sets.bins.push(pair);
        }
    }
    for _ in 0..rng.gen_range(1..=4) {
        let pair = (rng.gen_range(0..l), rng.gen_range(0..m));
        if taken.insert(pair) {
            sets.negatives.push(pair);
        }
    }
    sets
}

#[test]
fn gradient_correctness() {
    let start = std::time::Instant::now();
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked_total = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (l, m) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let d = rng.gen_range(2..=4);
        let xs = random_map(&mut rng, l, d);
        let xt = random_map(&mut rng, m, d);
        let sets = random_sets(&mut rng, l, m);
        let marg = Marginals::new(
            random_simplex(&mut rng, l + 1),
            random_simplex(&mut rng, m + 1),
        )
        .unwrap();
        let cfg = SolverConfig::default(); // lambda = 0.1, 10 iterations
        // Unit weights: the loss is linear in the weights, so they do not
        // change what the check covers, but large weights inflate the
        // truncation error of the finite-difference reference itself.
        let w = LossWeights { w_pos: 1.0, w_bin: 1.0, w_neg: 1.0 };
        for mode in [SolverMode::Balanced, SolverMode::Unbalanced] {
            let analytic =
                loss_gradient_wrt_features(&xs, &xt, &sets, &marg, &cfg, mode, &w).unwrap();
            let perturbed = |which: usize, k: usize, delta: f64| -> f64 {
                let mut vs: Vec<f64> = xs.matrix().iter().copied().collect();
                let mut vt: Vec<f64> = xt.matrix().iter().copied().collect();
                if which == 0 {
                    vs[k] += delta;
                } else {
                    vt[k] += delta;
                }
                let ps = FeatureMap::new(1, l, d, 14, vs).unwrap();
                let pt = FeatureMap::new(1, m, d, 14, vt).unwrap();
                ot_bce_loss_forward(&ps, &pt, &sets, &marg, &cfg, mode, &w).unwrap()
            };
            let mut check = |which: usize, grads: &Array2<f64>| {
                for (k, a) in grads.iter().enumerate() {
                    let numeric =
                        (perturbed(which, k, step) - perturbed(which, k, -step)) / (2.0 * step);
                    if a.abs().max(numeric.abs()) > 1e-6 {
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                        assert!(
                            rel < 1e-4,
                            "seed {seed} {mode}: entry {k} rel err {rel:e} (analytic {a}, fd {numeric})"
                        );
                        worst = worst.max(rel);
                        checked_total += 1;
                    }
                }
            };
            check(0, &analytic.grad_src);
            check(1, &analytic.grad_tgt);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion took {elapsed:?}");
    println!(
        "[PASS] gradient correctness: 100 instances x both modes, {checked_total} entries \
         checked, worst relative error {worst:.2e} (< 1e-4), runtime {elapsed:?} (< 60 s)"
    );
}

#[test]
fn marginal_construction() {
    // The reference figure values: s = 0.9, x = 0.2.
    let mask = PatchMask::new(3, 6, {
        let mut bits = vec![true; 9];
        bits.extend(vec![false; 9]);
        bits
    })
    .unwrap();
    let spec = MarginalSpec::new(0.9, 0.2, 0.2).unwrap();
    let est = estimate_marginals(&mask, &mask, &spec).unwrap();
    let a = est.marginals.a();
    let bin = a[18];
    assert!((bin - 0.72).abs() < 1e-12, "bin mass {bin}");
    let sum: f64 = a.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");

    // Monotonicity across a 100-point sweep of x.
    let mut last_bin = f64::INFINITY;
    let mut last_fg = -1.0;
    for k in 0..100 {
        let x = k as f64 / 99.0;
        let spec = MarginalSpec::new(0.9, x, x).unwrap();
        let est = estimate_marginals(&mask, &mask, &spec).unwrap();
        let a = est.marginals.a();
        if k > 0 {
            assert!(a[18] < last_bin, "bin mass not strictly decreasing at x={x}");
            assert!(a[0] > last_fg, "foreground mass not strictly increasing at x={x}");
        }
        last_bin = a[18];
        last_fg = a[0];
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    println!(
        "[PASS] marginal construction: bin mass {bin} (= 0.72 within 1e-12), simplex sum within \
         1e-12, bin/foreground masses strictly monotone over 100 x values"
    );
}

#[test]
fn pgck_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    // Decomposition identity in exact rational arithmetic.
    for _ in 0..1000 {
        let mut scored = Vec::new();
        for _ in 0..rng.gen_range(1..60) {
            let split = match rng.gen_range(0..3) {
                0 => QuerySplit::CounterpartOccluded,
                1 => QuerySplit::CounterpartVisible,
                _ => QuerySplit::NoCounterpart,
            };
            let bias = rng.gen_range(0.05..0.95);
            let correct = rng.gen_bool(bias);
            let ambiguity = if split == QuerySplit::CounterpartVisible {
                if correct {
                    AmbiguityClass::Unambiguous
                } else {
                    AmbiguityClass::Miss
                }
            } else {
                AmbiguityClass::NotApplicable
            };
            scored.push(PgckRecord {
                split,
                correct,
                ambiguity,
            });
        }
        let b = pgck_decompose(&scored);
        assert!(b.decomposition_identity_holds());
        // Cross-check the identity independently.
        let n = b.n10 + b.n11 + b.n1x;
        let lhs = Ratio::new(b.nhat10 + b.nhat11 + b.nhat1x, n);
        let mut rhs = Ratio::new(0u64, 1u64);
        for (nh, ns) in [(b.nhat10, b.n10), (b.nhat11, b.n11), (b.nhat1x, b.n1x)] {
            if ns > 0 {
                rhs += Ratio::new(nh, ns) * Ratio::new(ns, n);
            }
        }
        assert_eq!(lhs, rhs);
    }

    // Ambiguity subsets partition the counterpart-visible split and sum to
    // its correct count at every radius of a 15-point sweep.
    let size = (160, 120);
    let records: Vec<MatchRecord> = (0..300)
        .map(|_| {
            let pt = |rng: &mut ChaCha8Rng| {
                (rng.gen_range(0.0..160.0), rng.gen_range(0.0..120.0))
            };
            MatchRecord {
                query_id: 0,
                split: QuerySplit::CounterpartVisible,
                pred_px: pt(&mut rng),
                similarity: 1.0,
                gt_px: Some(pt(&mut rng)),
                sym_px: Some(pt(&mut rng)),
                image_size_tgt: size,
                bbox_tgt: None,
            }
        })
        .collect();
    for k in 1..=15 {
        let alpha = 0.01 * k as f64;
        let scored = score_records(&records, alpha, NormMode::Image).unwrap();
        let b = pgck_decompose(&scored);
        let amb = ambiguity_split(&scored).unwrap();
        assert_eq!(amb.total(), b.n11, "partition broken at alpha {alpha}");
        assert_eq!(
            amb.unambiguous + amb.ambiguous,
            b.nhat11,
            "nhat11 mismatch at alpha {alpha}"
        );
    }
    println!(
        "[PASS] PGCK algebra: decomposition identity exact on 1000 random record sets; \
         ambiguity classes partition the split and sum to nhat11 across a 15-point sweep"
    );
}

#[test]
fn segmentation_metrics() {
    // Hand-computed example, exact rational comparison.
    let conf = ConfusionMatrix::from_counts(
        vec![0, 1],
        ndarray::array![[1, 1], [0, 2]],
    )
    .unwrap();
    let exact = seg_metrics_exact(&conf).unwrap();
    assert_eq!(exact.acc, Ratio::new(3, 4));
    assert_eq!(exact.miou, Ratio::new(7, 12));

    // Normalization yields total mass 1.
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let counts = Array2::from_shape_fn((5, 5), |_| rng.gen_range(1..30u64));
    let conf = ConfusionMatrix::from_counts((0..5).collect(), counts).unwrap();
    let norm = confusion_normalize(&conf);
    let mass: f64 = norm.values.iter().sum();
    assert!((mass - 1.0).abs() < 1e-12, "normalized mass {mass}");

    // Nearest-centroid assignment against the brute-force oracle.
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let dim = rng.gen_range(2..6);
        let parts: Vec<u32> = (0..rng.gen_range(2..6)).collect();
        let samples: Vec<(Vec<f64>, u32)> = parts
            .iter()
            .flat_map(|&p| {
                (0..rng.gen_range(1..5))
                    .map(|_| {
                        (
                            (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>(),
                            p,
                        )
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let centroids = centroid_fit(&samples, &parts).unwrap();
        let patches = rng.gen_range(1..10);
        let values: Vec<f64> = (0..patches * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let map = FeatureMap::new(1, patches, dim, 14, values).unwrap();
        let labels = centroid_assign(&map, &centroids).unwrap();
        for p in 0..patches {
            let mut table: Vec<(f64, u32)> = (0..centroids.part_ids().len())
                .map(|row| {
                    let d2: f64 = map
                        .patch(p)
                        .iter()
                        .zip(centroids.centroid(row))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    (d2, centroids.part_ids()[row])
                })
                .collect();
            table.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(labels[p], table[0].1, "seed {seed} patch {p}");
        }
    }
    println!(
        "[PASS] segmentation metrics: hand example exact (Acc 3/4, mIoU 7/12), normalized \
         confusion mass 1 within 1e-12, centroid assignment matches brute force on 100 instances"
    );
}

#[test]
fn symmetry_resolution_training() {
    let start = std::time::Instant::now();
    let bench = ambiguity_benchmark();
    assert!(bench.seeds_disjoint(), "train/eval seed ranges overlap");
    let train_set = bench.train_dataset().unwrap();
    let eval_set = bench.eval_dataset().unwrap();
    let cfg = TrainConfig {
        steps: 600, // <= 1000 gradient steps
        learning_rate: 0.5,
        batch_pairs: 4,
        sigma_init: 0.01,
        seed: 0,
        ..TrainConfig::default()
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = LinearAdapter::random_init(bench.base.dim, cfg.sigma_init, &mut init_rng);
    let before = evaluate_adapter(&init, &eval_set, 0.1, &cfg.solver, cfg.shape_mass).unwrap();

    let outcome = train(&train_set, &cfg).unwrap();
    let after =
        evaluate_adapter(&outcome.adapter, &eval_set, 0.1, &cfg.solver, cfg.shape_mass).unwrap();

    let before_acc = before.pgck.expect("split-11 queries present");
    let after_acc = after.pgck.expect("split-11 queries present");
    assert!(
        before_acc <= 0.6,
        "untrained split-11 accuracy {before_acc} above 0.6"
    );
    assert!(
        after_acc >= 0.9,
        "trained split-11 accuracy {after_acc} below 0.9"
    );

    let bin_before = before.mean_bin_mass.expect("occluded queries present");
    let bin_after = after.mean_bin_mass.expect("occluded queries present");
    assert!(
        bin_after > bin_before,
        "mean bin mass did not increase: {bin_before} -> {bin_after}"
    );

    let underline_before = before.unambiguous_ratio.unwrap();
    let underline_after = after.unambiguous_ratio.unwrap();
    assert!(
        underline_after - underline_before >= 0.3,
        "unambiguous-TP ratio improved only {underline_before} -> {underline_after}"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "criterion took {elapsed:?}");
    println!(
        "[PASS] symmetry-resolution training: split-11 accuracy {before_acc:.3} -> \
         {after_acc:.3} (<= 0.6 -> >= 0.9) in {} steps, mean bin mass {bin_before:.4} -> \
         {bin_after:.4} (strictly up), unambiguous-TP ratio {underline_before:.3} -> \
         {underline_after:.3} (+{:.3} >= 0.3), runtime {elapsed:?} (< 5 min)",
        cfg.steps,
        underline_after - underline_before
    );
}

/// Oracle optimality dominates any feasible plan the solvers produce.
#[test]
fn oracle_dominates_feasible_solver_plans() {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    for _ in 0..20 {
        let (l, m) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let c = random_score(&mut rng, l, m, 0.3);
        let marg = Marginals::new(
            random_simplex(&mut rng, l + 1),
            random_simplex(&mut rng, m + 1),
        )
        .unwrap();
        let (lp_value, _) = exact_ot_oracle(&c, &marg).unwrap();
        let cfg = SolverConfig {
            iterations: 2000,
            ..SolverConfig::default()
        };
        let plan = sinkhorn_balanced(&c, &marg, &cfg).unwrap();
        assert!(plan.marginal_residual(&marg) < 1e-6);
        assert!(plan.score_inner_product(&c) <= lp_value + 1e-9);
    }
    println!("[PASS] oracle dominance: LP value bounds every near-feasible entropic plan");
}

/// Cross-module property: mismatched visibility ratios make the balanced
/// intent infeasible, yet the KL-relaxed solver stays finite.
#[test]
fn unbalanced_solver_tolerates_mismatched_visibility() {
    let mask = PatchMask::new(2, 4, vec![true, true, false, false, true, false, true, false])
        .unwrap();
    let spec = MarginalSpec::new(0.9, 0.9, 0.2).unwrap();
    let est = estimate_marginals(&mask, &mask, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let c = random_score(&mut rng, 8, 8, 0.3);
    let plan = sinkhorn_unbalanced(&c, &est.marginals, &SolverConfig::default()).unwrap();
    assert!(plan.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    println!("[PASS] mismatched visibility: unbalanced plan finite and nonnegative");
}

/// The generator feeds the loss pipeline end to end (annotation contract).
#[test]
fn annotation_contract_feeds_the_loss_pipeline() {
    let bench = ambiguity_benchmark();
    let pair = geco_core::synth::gen_synthetic_pair(&bench.base).unwrap();
    let plc = geco_core::loss::PairLossConfig::default();
    let (grads, sets, _) = geco_core::loss::pair_loss_gradient(
        &pair.features_src,
        &pair.features_tgt,
        &pair.annotation,
        &plc,
    )
    .unwrap();
    assert!(grads.loss.is_finite());
    assert!(!sets.positives.is_empty());
    println!("[PASS] pipeline contract: generated pair produces finite loss and gradients");
}

