//! `geco bench`: wall-clock timing of Sinkhorn solves at configurable sizes,
//! single- and multi-threaded, with warm-up and per-size statistics.
//!
//! The solved plans are deterministic for a fixed seed; timings naturally
//! are not. Each size reports a plan checksum so reproducibility of the
//! compute itself stays checkable.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use geco_core::solver::{
    sinkhorn_balanced, sinkhorn_unbalanced, Marginals, ScoreMatrix, SolverConfig, SolverMode,
};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cmd_solve::parse_mode;
use crate::report::emit;
use crate::Context;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated patch counts; each solve runs on an (n+1)x(n+1)
    /// dustbin-augmented matrix.
    #[arg(long, default_value = "100,400,1369", value_delimiter = ',')]
    sizes: Vec<usize>,

    #[arg(long, default_value_t = 10)]
    iters: u32,

    /// Timed runs per size.
    #[arg(long, default_value_t = 100)]
    runs: usize,

    /// Untimed warm-up runs per size.
    #[arg(long, default_value_t = 5)]
    warmup: usize,

    #[arg(long, default_value = "unbalanced")]
    mode: String,

    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct ThreadedStats {
    threads: usize,
    runs: usize,
    mean_ms: f64,
    std_ms: f64,
    min_ms: f64,
    max_ms: f64,
}

#[derive(serde::Serialize)]
struct SizeReport {
    n_patches: usize,
    matrix_dim: usize,
    iterations: u32,
    single: ThreadedStats,
    multi: ThreadedStats,
    plan_checksum: f64,
}

#[derive(serde::Serialize)]
struct BenchReport {
    report: &'static str,
    version: u32,
    out: String,
    mode: String,
    seed: u64,
    sizes: Vec<SizeReport>,
}

fn stats(threads: usize, times_ms: &[f64]) -> ThreadedStats {
    let n = times_ms.len() as f64;
    let mean = times_ms.iter().sum::<f64>() / n;
    let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    ThreadedStats {
        threads,
        runs: times_ms.len(),
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: times_ms.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times_ms.iter().copied().fold(0.0, f64::max),
    }
}

fn bench_instance(seed: u64, n: usize, z: f64) -> (ScoreMatrix, Marginals) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::from_elem((n + 1, n + 1), z);
    for i in 0..n {
        for j in 0..n {
            values[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    let score = ScoreMatrix::from_raw(values, z).expect("bins filled with z");
    let marg = Marginals::uniform(n + 1, n + 1);
    (score, marg)
}

pub fn run(ctx: &Context, args: BenchArgs) -> anyhow::Result<()> {
    let mode = parse_mode(&args.mode)?;
    if args.sizes.is_empty() || args.sizes.iter().any(|&s| s == 0) {
        return Err(geco_core::Error::InvalidConfig("sizes must be positive".into()).into());
    }
    if args.runs == 0 {
        return Err(geco_core::Error::InvalidConfig("runs must be >= 1".into()).into());
    }
    let cfg = SolverConfig {
        iterations: args.iters,
        ..SolverConfig::default()
    };
    let solve = |score: &ScoreMatrix, marg: &Marginals| match mode {
        SolverMode::Balanced => sinkhorn_balanced(score, marg, &cfg),
        SolverMode::Unbalanced => sinkhorn_unbalanced(score, marg, &cfg),
    };

    let multi_threads = ctx.threads.max(2);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(multi_threads)
        .build()?;

    let mut sizes = Vec::new();
    for &n in &args.sizes {
        let (score, marg) = bench_instance(ctx.seed, n, cfg.z);
        for _ in 0..args.warmup {
            solve(&score, &marg)?;
        }
        let mut single_times = Vec::with_capacity(args.runs);
        let mut checksum = 0.0;
        for _ in 0..args.runs {
            let start = Instant::now();
            let plan = solve(&score, &marg)?;
            single_times.push(start.elapsed().as_secs_f64() * 1e3);
            checksum = plan.values().iter().fold(0.0, |acc, v| acc + v);
        }

        // Concurrent solves on independent copies of the same instance;
        // reported as wall time per solve under full pool load.
        let start = Instant::now();
        let results: Vec<geco_core::Result<f64>> = pool.install(|| {
            (0..args.runs)
                .into_par_iter()
                .map(|_| {
                    let t = Instant::now();
                    solve(&score, &marg)?;
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect()
        });
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut multi_times = Vec::with_capacity(args.runs);
        for r in results {
            multi_times.push(r?);
        }
        let mut multi = stats(multi_threads, &multi_times);
        // Throughput view: wall time amortized over solves.
        multi.mean_ms = total_ms / args.runs as f64;

        sizes.push(SizeReport {
            n_patches: n,
            matrix_dim: n + 1,
            iterations: args.iters,
            single: stats(1, &single_times),
            multi,
            plan_checksum: checksum,
        });
    }

    emit(
        &BenchReport {
            report: "bench",
            version: 1,
            out: args.out.display().to_string(),
            mode: mode.to_string(),
            seed: ctx.seed,
            sizes,
        },
        Some(&args.out),
    )?;
    Ok(())
}
