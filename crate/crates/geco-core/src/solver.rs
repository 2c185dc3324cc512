//! Dustbin-augmented score matrices and entropic optimal-transport solvers.
//!
//! The solvers maximize `<P, C> + lambda * H(P)` over the transport polytope
//! (balanced mode) or with KL penalties `alpha`/`beta` replacing the marginal
//! constraints (unbalanced mode). Iterations run in the log domain throughout:
//! with `lambda = 0.1` and cosine scores, naive exponentiation of `C/lambda`
//! overflows, so scaling updates are expressed as log-sum-exp sweeps over
//! `C/lambda` plus the running potentials.
//!
//! Cost-convention note: the literature usually minimizes a cost; here the
//! score matrix is a similarity and the objective is maximized, which is the
//! same problem with cost = -C.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::features::FeatureMap;

pub const PLAN_MAGIC: [u8; 4] = *b"GECP";
pub const PLAN_VERSION: u32 = 1;

/// Dustbin-augmented cosine score matrix: `(l+1) x (m+1)` with the last row,
/// last column, and corner all holding the bin threshold `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    l: usize,
    m: usize,
    z: f64,
    values: Array2<f64>,
}

impl ScoreMatrix {
    /// Builds the augmented score matrix from two feature maps: cosine
    /// similarity on the non-bin block, `z` on the bin row/column/corner.
    pub fn from_features(xs: &FeatureMap, xt: &FeatureMap, z: f64) -> Result<Self> {
        if xs.dim() != xt.dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature dimensionality differs: {} vs {}",
                xs.dim(),
                xt.dim()
            )));
        }
        let xs_unit = xs.l2_normalized()?;
        let xt_unit = xt.l2_normalized()?;
        let l = xs.patch_count();
        let m = xt.patch_count();
        let mut values = Array2::from_elem((l + 1, m + 1), z);
        let block = xs_unit.matrix().dot(&xt_unit.matrix().t());
        values.slice_mut(ndarray::s![..l, ..m]).assign(&block);
        Ok(Self { l, m, z, values })
    }

    /// Wraps an existing augmented matrix, checking the dustbin invariants
    /// and the cosine range of non-bin entries.
    pub fn from_raw(values: Array2<f64>, z: f64) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows < 2 || cols < 2 {
            return Err(Error::DimensionMismatch(
                "score matrix must be at least 2x2 including the bin".into(),
            ));
        }
        let (l, m) = (rows - 1, cols - 1);
        for j in 0..cols {
            if values[(l, j)] != z {
                return Err(Error::SolverContractViolation(format!(
                    "bin row entry ({l},{j}) is not z"
                )));
            }
        }
        for i in 0..rows {
            if values[(i, m)] != z {
                return Err(Error::SolverContractViolation(format!(
                    "bin column entry ({i},{m}) is not z"
                )));
            }
        }
        for i in 0..l {
            for j in 0..m {
                let v = values[(i, j)];
                if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
                    return Err(Error::SolverContractViolation(format!(
                        "score entry ({i},{j}) = {v} outside the cosine range"
                    )));
                }
            }
        }
        Ok(Self { l, m, z, values })
    }

    /// Source patch count (excluding the bin).
    pub fn l(&self) -> usize {
        self.l
    }

    /// Target patch count (excluding the bin).
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Index of the source dustbin row.
    pub fn bin_row(&self) -> usize {
        self.l
    }

    /// Index of the target dustbin column.
    pub fn bin_col(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

/// Marginal vectors a (length l+1) and b (length m+1) over patches plus bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Marginals {
    /// Validates nonnegativity and simplex membership (sums within 1e-9 of 1).
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        for (name, v) in [("a", &a), ("b", &b)] {
            if v.is_empty() {
                return Err(Error::InvalidMarginals(format!("{name} is empty")));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidMarginals(format!(
                    "{name} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidMarginals(format!(
                    "{name} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { a, b })
    }

    /// Skips the simplex check. Intended for tests of the KL-relaxed solver,
    /// which tolerates inconsistent mass estimates; entries must still be
    /// nonnegative and finite.
    pub fn new_unchecked(a: Vec<f64>, b: Vec<f64>) -> Self {
        debug_assert!(a.iter().chain(b.iter()).all(|x| x.is_finite() && *x >= 0.0));
        Self { a, b }
    }

    pub fn uniform(len_a: usize, len_b: usize) -> Self {
        Self {
            a: vec![1.0 / len_a as f64; len_a],
            b: vec![1.0 / len_b as f64; len_b],
        }
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    fn check_shape(&self, c: &ScoreMatrix) -> Result<()> {
        if self.a.len() != c.l() + 1 || self.b.len() != c.m() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "marginals ({}, {}) do not match the augmented score matrix ({}, {})",
                self.a.len(),
                self.b.len(),
                c.l() + 1,
                c.m() + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    Balanced,
    Unbalanced,
}

impl std::fmt::Display for SolverMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverMode::Balanced => write!(f, "balanced"),
            SolverMode::Unbalanced => write!(f, "unbalanced"),
        }
    }
}

/// Solver hyperparameters. Defaults are the training-time values:
/// `lambda = 0.1`, `alpha = beta = 10`, 10 iterations, bin threshold `z = 0.3`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: u32,
    pub z: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 10.0,
            beta: 10.0,
            iterations: 10,
            z: 0.3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig("lambda must be > 0".into()));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidConfig("alpha and beta must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !self.z.is_finite() {
            return Err(Error::InvalidConfig("z must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters echoed alongside a solved plan.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlanParams {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: u32,
}

/// Nonnegative transport plan over the augmented index set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: Array2<f64>,
    mode: SolverMode,
    params: PlanParams,
}

impl TransportPlan {
    pub fn from_values(values: Array2<f64>, mode: SolverMode, params: PlanParams) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::SolverContractViolation(
                "plan entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values, mode, params })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn mode(&self) -> SolverMode {
        self.mode
    }

    pub fn params(&self) -> PlanParams {
        self.params
    }

    /// Row sums, accumulated left to right.
    pub fn row_sums(&self) -> Vec<f64> {
        self.values
            .rows()
            .into_iter()
            .map(|row| row.iter().fold(0.0, |acc, v| acc + v))
            .collect()
    }

    /// Column sums, accumulated left to right (top to bottom).
    pub fn col_sums(&self) -> Vec<f64> {
        let (n, m) = self.values.dim();
        let mut sums = vec![0.0; m];
        for i in 0..n {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += self.values[(i, j)];
            }
        }
        sums
    }

    /// `<P, C>` over the augmented matrix.
    pub fn score_inner_product(&self, c: &ScoreMatrix) -> f64 {
        self.values
            .iter()
            .zip(c.values().iter())
            .fold(0.0, |acc, (p, s)| acc + p * s)
    }

    /// `||P1 - a||_1 + ||P^T 1 - b||_1`.
    pub fn marginal_residual(&self, marg: &Marginals) -> f64 {
        let rows = self.row_sums();
        let cols = self.col_sums();
        let ra: f64 = rows
            .iter()
            .zip(marg.a())
            .map(|(r, a)| (r - a).abs())
            .sum();
        let rb: f64 = cols
            .iter()
            .zip(marg.b())
            .map(|(c, b)| (c - b).abs())
            .sum();
        ra + rb
    }
}

/// Scaled dual potentials and per-iteration history of a log-domain run.
///
/// `f_hist[t]` / `g_hist[t]` hold `f / lambda` and `g / lambda`; the history
/// is what the loss module replays to backpropagate through the unrolled
/// iterations. `g_hist` has one extra leading entry for the zero initializer.
pub(crate) struct SinkhornRun {
    pub f_hist: Vec<Vec<f64>>,
    pub g_hist: Vec<Vec<f64>>,
    pub log_plan: Array2<f64>,
    pub iterations_run: u32,
}

fn logsumexp_shifted(vals: &[f64], shift: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (v, s) in vals.iter().zip(shift) {
        let x = v + s;
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for (v, s) in vals.iter().zip(shift) {
        sum += (v + s - max).exp();
    }
    max + sum.ln()
}

/// Residual-aware log-domain Sinkhorn over `chat = C / lambda`.
///
/// `phi_a`/`phi_b` are the scaling exponents: 1 in balanced mode,
/// `alpha/(alpha+lambda)` and `beta/(beta+lambda)` in unbalanced mode.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_log_sinkhorn(
    chat: &Array2<f64>,
    log_a: &[f64],
    log_b: &[f64],
    phi_a: f64,
    phi_b: f64,
    iterations: u32,
    stop_residual: Option<(f64, &Marginals)>,
    record_history: bool,
) -> Result<SinkhornRun> {
    let (n, m) = chat.dim();
    let chat_flat = chat.as_slice().expect("standard layout");
    // Transposed copy so both update sweeps run over contiguous memory.
    let mut chat_t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            chat_t[j * n + i] = chat_flat[i * m + j];
        }
    }

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut f_hist = Vec::new();
    let mut g_hist = Vec::new();
    if record_history {
        g_hist.push(g.clone());
    }

    let mut iterations_run = 0;
    for _ in 0..iterations {
        for i in 0..n {
            let lse = logsumexp_shifted(&chat_flat[i * m..(i + 1) * m], &g);
            f[i] = phi_a * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = logsumexp_shifted(&chat_t[j * n..(j + 1) * n], &f);
            g[j] = phi_b * (log_b[j] - lse);
        }
        iterations_run += 1;
        for v in f.iter().chain(g.iter()) {
            if v.is_nan() || *v == f64::INFINITY {
                return Err(Error::NumericalOverflow);
            }
        }
        if record_history {
            f_hist.push(f.clone());
            g_hist.push(g.clone());
        }
        if let Some((tol, marg)) = stop_residual {
            let residual = residual_from_potentials(chat_flat, n, m, &f, &g, marg);
            if residual < tol {
                break;
            }
        }
    }

    let mut log_plan = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            log_plan[(i, j)] = chat_flat[i * m + j] + f[i] + g[j];
        }
    }
    Ok(SinkhornRun {
        f_hist,
        g_hist,
        log_plan,
        iterations_run,
    })
}

fn residual_from_potentials(
    chat: &[f64],
    n: usize,
    m: usize,
    f: &[f64],
    g: &[f64],
    marg: &Marginals,
) -> f64 {
    let mut residual = 0.0;
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..m {
            let p = (chat[i * m + j] + f[i] + g[j]).exp();
            row_sum += p;
            col_sums[j] += p;
        }
        residual += (row_sum - marg.a()[i]).abs();
    }
    for (c, b) in col_sums.iter().zip(marg.b()) {
        residual += (c - b).abs();
    }
    residual
}

fn log_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn solve(
    c: &ScoreMatrix,
    marg: &Marginals,
    cfg: &SolverConfig,
    mode: SolverMode,
    stop_tol: Option<f64>,
) -> Result<(TransportPlan, u32)> {
    cfg.validate()?;
    marg.check_shape(c)?;
    let (phi_a, phi_b) = match mode {
        SolverMode::Balanced => (1.0, 1.0),
        SolverMode::Unbalanced => (
            cfg.alpha / (cfg.alpha + cfg.lambda),
            cfg.beta / (cfg.beta + cfg.lambda),
        ),
    };
    let chat = c.values().mapv(|v| v / cfg.lambda);
    let log_a: Vec<f64> = marg.a().iter().map(|&x| log_or_neg_inf(x)).collect();
    let log_b: Vec<f64> = marg.b().iter().map(|&x| log_or_neg_inf(x)).collect();
    let run = run_log_sinkhorn(
        &chat,
        &log_a,
        &log_b,
        phi_a,
        phi_b,
        cfg.iterations,
        stop_tol.map(|t| (t, marg)),
        false,
    )?;
    let values = run.log_plan.mapv(f64::exp);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    let plan = TransportPlan {
        values,
        mode,
        params: PlanParams {
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            beta: cfg.beta,
            iterations: run.iterations_run,
        },
    };
    Ok((plan, run.iterations_run))
}

/// Entropic OT with hard marginal constraints, `cfg.iterations` alternating
/// scaling updates in the log domain.
pub fn sinkhorn_balanced(c: &ScoreMatrix, marg: &Marginals, cfg: &SolverConfig) -> Result<TransportPlan> {
    solve(c, marg, cfg, SolverMode::Balanced, None).map(|(p, _)| p)
}

/// KL-relaxed unbalanced OT: scaling exponents are damped to
/// `alpha/(alpha+lambda)` and `beta/(beta+lambda)`, so row/column sums track
/// the marginals only as softly as the KL weights demand.
pub fn sinkhorn_unbalanced(c: &ScoreMatrix, marg: &Marginals, cfg: &SolverConfig) -> Result<TransportPlan> {
    solve(c, marg, cfg, SolverMode::Unbalanced, None).map(|(p, _)| p)
}

/// Like the fixed-count solvers, but stops once the balanced marginal residual
/// drops below `stop_tol`. Returns the plan and the iterations actually run.
pub fn sinkhorn_with_stop(
    c: &ScoreMatrix,
    marg: &Marginals,
    cfg: &SolverConfig,
    mode: SolverMode,
    stop_tol: f64,
) -> Result<(TransportPlan, u32)> {
    solve(c, marg, cfg, mode, Some(stop_tol))
}

pub(crate) fn scaling_exponents(cfg: &SolverConfig, mode: SolverMode) -> (f64, f64) {
    match mode {
        SolverMode::Balanced => (1.0, 1.0),
        SolverMode::Unbalanced => (
            cfg.alpha / (cfg.alpha + cfg.lambda),
            cfg.beta / (cfg.beta + cfg.lambda),
        ),
    }
}

// ── Plan file IO ─────────────────────────────────────────────────────────

/// Plan file contents: magic "GECP", u32 version, u32 rows, u32 cols,
/// f32 values row-major, then the config echoed as f32 lambda/alpha/beta
/// and u32 iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFile {
    pub values: Array2<f64>,
    pub params: PlanParams,
}

pub fn write_plan_file(plan: &TransportPlan, w: &mut impl Write) -> Result<()> {
    let (rows, cols) = plan.values.dim();
    w.write_all(&PLAN_MAGIC)?;
    w.write_all(&PLAN_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in plan.values.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.write_all(&(plan.params.lambda as f32).to_le_bytes())?;
    w.write_all(&(plan.params.alpha as f32).to_le_bytes())?;
    w.write_all(&(plan.params.beta as f32).to_le_bytes())?;
    w.write_all(&plan.params.iterations.to_le_bytes())?;
    Ok(())
}

pub fn read_plan_file(r: &mut impl Read) -> Result<PlanFile> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut magic[filled..])?;
        if n == 0 {
            return Err(Error::TruncatedPayload {
                expected: 4,
                found: filled,
            });
        }
        filled += n;
    }
    if magic != PLAN_MAGIC {
        return Err(Error::BadMagic {
            expected: PLAN_MAGIC,
            found: magic,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let take_u32 = |bytes: &[u8], at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(Error::TruncatedPayload {
                expected: at + 4,
                found: bytes.len(),
            })
    };
    let version = take_u32(&rest, 0)?;
    if version != PLAN_VERSION {
        return Err(Error::VersionMismatch {
            expected: PLAN_VERSION,
            found: version,
        });
    }
    let rows = take_u32(&rest, 4)? as u64;
    let cols = take_u32(&rest, 8)? as u64;
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c <= (1 << 31))
        .ok_or(Error::DimensionOverflow {
            rows,
            cols,
            dim: 1,
        })? as usize;
    let expected = 12 + count * 4 + 16;
    if rest.len() < expected {
        return Err(Error::TruncatedPayload {
            expected: expected + 4,
            found: rest.len() + 4,
        });
    }
    let mut values = Vec::with_capacity(count);
    for k in 0..count {
        let at = 12 + k * 4;
        let b = &rest[at..at + 4];
        values.push(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
    }
    let tail = 12 + count * 4;
    let read_f32 = |at: usize| {
        let b = &rest[at..at + 4];
        f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let params = PlanParams {
        lambda: read_f32(tail),
        alpha: read_f32(tail + 4),
        beta: read_f32(tail + 8),
        iterations: take_u32(&rest, tail + 12)?,
    };
    let values = Array2::from_shape_vec((rows as usize, cols as usize), values)
        .expect("shape checked above");
    Ok(PlanFile { values, params })
}

pub fn write_plan_path(plan: &TransportPlan, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_plan_file(plan, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn read_plan_path(path: impl AsRef<Path>) -> Result<PlanFile> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_plan_file(&mut file)
}
