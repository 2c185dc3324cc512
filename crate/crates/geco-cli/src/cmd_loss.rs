//! `geco loss`: OT-BCE loss of one generated pair, with an optional
//! finite-difference gradient comparison.

use std::path::PathBuf;

use clap::Args;
use geco_core::features::{read_annotation_path, read_feature_path, FeatureMap};
use geco_core::loss::{
    loss_gradient_wrt_features, ot_bce_loss_forward, pair_loss_gradient, LossWeights,
    PairLossConfig,
};
use geco_core::solver::SolverConfig;

use crate::cmd_solve::parse_mode;
use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Directory holding src.gecf, tgt.gecf, and pair.json.
    #[arg(long)]
    pair_dir: PathBuf,

    #[arg(long, default_value = "unbalanced")]
    mode: String,

    #[arg(long, default_value_t = 0.1)]
    lambda: f64,

    #[arg(long, default_value_t = 10.0)]
    alpha: f64,

    #[arg(long, default_value_t = 10.0)]
    beta: f64,

    #[arg(long, default_value_t = 10)]
    iters: u32,

    #[arg(long, default_value_t = 0.3)]
    z: f64,

    #[arg(long, default_value_t = 1.0)]
    w_pos: f64,

    #[arg(long, default_value_t = 1.0)]
    w_bin: f64,

    #[arg(long, default_value_t = 10.0)]
    w_neg: f64,

    /// Sampled foreground/background negative pairs per direction.
    #[arg(long, default_value_t = 8)]
    neg_samples: usize,

    /// Compare analytic gradients against central finite differences.
    #[arg(long)]
    check_grad: bool,

    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,

    /// Optional report file; the report always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct GradCheckReport {
    step: f64,
    checked_entries: usize,
    max_relative_error: f64,
    grad_norm: f64,
}

#[derive(serde::Serialize)]
struct LossReport {
    report: &'static str,
    version: u32,
    pair_dir: String,
    mode: String,
    loss: f64,
    positives: usize,
    bins: usize,
    negatives: usize,
    grad_check: Option<GradCheckReport>,
}

pub fn run(ctx: &Context, args: LossArgs) -> anyhow::Result<()> {
    let mode = parse_mode(&args.mode)?;
    let xs = read_feature_path(args.pair_dir.join("src.gecf"))?;
    let xt = read_feature_path(args.pair_dir.join("tgt.gecf"))?;
    let ann = read_annotation_path(args.pair_dir.join("pair.json"))?;
    let plc = PairLossConfig {
        solver: SolverConfig {
            lambda: args.lambda,
            alpha: args.alpha,
            beta: args.beta,
            iterations: args.iters,
            z: args.z,
        },
        mode,
        weights: LossWeights {
            w_pos: args.w_pos,
            w_bin: args.w_bin,
            w_neg: args.w_neg,
        },
        shape_mass: geco_core::marginals::DEFAULT_SHAPE_MASS,
        neg_fg_bg_samples: args.neg_samples,
        seed: ctx.seed,
    };
    let (grads, sets, marginals) = pair_loss_gradient(&xs, &xt, &ann, &plc)?;

    let grad_check = if args.check_grad {
        let forward = |vs: Vec<f64>, vt: Vec<f64>| -> geco_core::Result<f64> {
            let ps = FeatureMap::new(xs.rows(), xs.cols(), xs.dim(), xs.patch_size_px(), vs)?;
            let pt = FeatureMap::new(xt.rows(), xt.cols(), xt.dim(), xt.patch_size_px(), vt)?;
            ot_bce_loss_forward(&ps, &pt, &sets, &marginals, &plc.solver, mode, &plc.weights)
        };
        let base_s: Vec<f64> = xs.matrix().iter().copied().collect();
        let base_t: Vec<f64> = xt.matrix().iter().copied().collect();
        let analytic = loss_gradient_wrt_features(
            &xs,
            &xt,
            &sets,
            &marginals,
            &plc.solver,
            mode,
            &plc.weights,
        )?;
        let mut max_rel: f64 = 0.0;
        let mut checked = 0usize;
        let mut grad_norm = 0.0;
        let mut check = |which: usize, k: usize, a: f64| -> geco_core::Result<()> {
            grad_norm += a * a;
            let mut vs = base_s.clone();
            let mut vt = base_t.clone();
            let slot = if which == 0 { &mut vs[k] } else { &mut vt[k] };
            *slot += args.fd_step;
            let plus = forward(vs.clone(), vt.clone())?;
            let slot = if which == 0 { &mut vs[k] } else { &mut vt[k] };
            *slot -= 2.0 * args.fd_step;
            let minus = forward(vs, vt)?;
            let numeric = (plus - minus) / (2.0 * args.fd_step);
            if a.abs().max(numeric.abs()) > 1e-6 {
                checked += 1;
                max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()));
            }
            Ok(())
        };
        for (k, a) in analytic.grad_src.iter().enumerate() {
            check(0, k, *a)?;
        }
        for (k, a) in analytic.grad_tgt.iter().enumerate() {
            check(1, k, *a)?;
        }
        Some(GradCheckReport {
            step: args.fd_step,
            checked_entries: checked,
            max_relative_error: max_rel,
            grad_norm: grad_norm.sqrt(),
        })
    } else {
        None
    };

    emit(
        &LossReport {
            report: "loss",
            version: 1,
            pair_dir: args.pair_dir.display().to_string(),
            mode: mode.to_string(),
            loss: grads.loss,
            positives: sets.positives.len(),
            bins: sets.bins.len(),
            negatives: sets.negatives.len(),
            grad_check,
        },
        args.out.as_deref(),
    )?;
    Ok(())
}
