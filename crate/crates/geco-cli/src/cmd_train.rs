//! `geco train-toy`: train the linear adapter on synthetic pairs and report
//! held-out metrics before and after.

use std::path::PathBuf;

use clap::Args;
use geco_core::synth::{gen_dataset, SyntheticPairSpec};
use geco_core::trainer::{
    evaluate_adapter, train, AdapterEvaluation, LinearAdapter, TrainConfig,
};

use crate::report::emit;
use crate::Context;

/// Dataset description consumed by train-toy: one base generator spec plus
/// disjoint train/eval seed counts.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainSpec {
    pub pair: SyntheticPairSpec,
    pub train_pairs: u64,
    pub eval_pairs: u64,
    /// Evaluation seeds start at `pair.seed + eval_seed_offset`.
    #[serde(default = "default_eval_offset")]
    pub eval_seed_offset: u64,
}

fn default_eval_offset() -> u64 {
    10_000
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Train spec (JSON, see TrainSpec).
    #[arg(long)]
    spec: PathBuf,

    #[arg(long, default_value_t = 500)]
    steps: usize,

    #[arg(long, default_value_t = 0.5)]
    lr: f64,

    #[arg(long, default_value_t = 4)]
    batch: usize,

    #[arg(long, default_value_t = 0.01)]
    sigma_init: f64,

    /// PCK radius for the held-out evaluation.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,

    /// Output adapter weights (binary).
    #[arg(long)]
    out: PathBuf,

    /// Output training report (JSON).
    #[arg(long)]
    report: PathBuf,
}

#[derive(serde::Serialize)]
struct TrainReport {
    report: &'static str,
    version: u32,
    out: String,
    steps: usize,
    learning_rate: f64,
    batch_pairs: usize,
    train_pairs: u64,
    eval_pairs: u64,
    loss_first: Option<f64>,
    loss_last: Option<f64>,
    untrained: AdapterEvaluation,
    trained: AdapterEvaluation,
    loss_trace: Vec<f64>,
}

pub fn run(ctx: &Context, args: TrainToyArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec).map_err(geco_core::Error::Io)?;
    let spec: TrainSpec = serde_json::from_str(&text).map_err(geco_core::Error::Json)?;
    spec.pair.validate()?;
    if spec.train_pairs == 0 || spec.eval_pairs == 0 {
        return Err(
            geco_core::Error::InvalidConfig("train_pairs and eval_pairs must be >= 1".into())
                .into(),
        );
    }
    if spec.eval_seed_offset < spec.train_pairs {
        return Err(geco_core::Error::InvalidConfig(
            "eval seeds overlap the training range".into(),
        )
        .into());
    }
    let train_set = gen_dataset(&spec.pair, spec.pair.seed..spec.pair.seed + spec.train_pairs)?;
    let eval_start = spec.pair.seed + spec.eval_seed_offset;
    let eval_set = gen_dataset(&spec.pair, eval_start..eval_start + spec.eval_pairs)?;

    let cfg = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        batch_pairs: args.batch,
        sigma_init: args.sigma_init,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    let mut init_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let init = LinearAdapter::random_init(spec.pair.dim, cfg.sigma_init, &mut init_rng);
    let untrained = evaluate_adapter(&init, &eval_set, args.alpha, &cfg.solver, cfg.shape_mass)?;

    let outcome = train(&train_set, &cfg)?;
    let trained = evaluate_adapter(
        &outcome.adapter,
        &eval_set,
        args.alpha,
        &cfg.solver,
        cfg.shape_mass,
    )?;
    outcome.adapter.write_path(&args.out)?;

    emit(
        &TrainReport {
            report: "train-toy",
            version: 1,
            out: args.out.display().to_string(),
            steps: args.steps,
            learning_rate: args.lr,
            batch_pairs: args.batch,
            train_pairs: spec.train_pairs,
            eval_pairs: spec.eval_pairs,
            loss_first: outcome.loss_trace.first().copied(),
            loss_last: outcome.loss_trace.last().copied(),
            untrained,
            trained,
            loss_trace: outcome.loss_trace,
        },
        Some(&args.report),
    )?;
    Ok(())
}
