//! Experiment plumbing: instances, dispatch, verification, and reports.

pub mod recurrence;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caqr::{params_1d, params_3d, qr_1d_eg, qr_3d_eg};
use crate::collectives::{self, balanced_sizes, Variant};
use crate::dense::{apply_q_block, local_householder_qr, local_mm, local_mm_tn, Matrix};
use crate::error::{Error, Result};
use crate::matmul::{fit_grid, mm_3d, DistMatrix, GridLayout, Operand};
use crate::sim::{CostParams, CostVector, Machine, OpCount, Trace};
use crate::tsqr::tsqr;

/// Residual and orthogonality level every QR run must reach.
pub const QR_TOLERANCE: f64 = 1e-10;

/// Reproducible `m×n` matrix with entries uniform in `[−1, 1]`.
pub fn generate_instance(m: usize, n: usize, seed: u64) -> Result<Matrix> {
    if m < n || n == 0 {
        return Err(Error::Precondition(format!("instances need m ≥ n ≥ 1, got {m}x{n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..=1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// `‖A − Q[R; 0]‖_F / ‖A‖_F`.
    pub residual: f64,
    /// `‖QᵀQ − I‖_F`, the larger of the leading-columns and the exact estimate.
    pub orthogonality: f64,
    /// `min_D ‖D·R − R_oracle‖_F / ‖R_oracle‖_F` over diagonal sign matrices.
    pub r_deviation: f64,
}

fn cholesky_lower(g: &Matrix) -> Result<Matrix> {
    let n = g.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = g[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= 0.0 {
            return Err(Error::Precondition("basis Gram matrix is not positive definite".into()));
        }
        l[(j, j)] = d.sqrt();
        for i in j + 1..n {
            let s = g[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / l[(j, j)];
        }
    }
    Ok(l)
}

/// Checks `Q = I − V·T·Vᵀ` and `R` against `A` and a local Householder oracle.
pub fn verify_qr(a: &Matrix, v: &Matrix, t: &Matrix, r: &Matrix) -> Result<Verification> {
    let (m, n) = a.shape();
    if v.shape() != (m, n) || t.shape() != (n, n) || r.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "A {m}x{n} with V {:?}, T {:?}, R {:?}",
            v.shape(),
            t.shape(),
            r.shape()
        )));
    }
    let ops = &mut OpCount::default();
    let mut rr = Matrix::zeros(m, n);
    rr.set_block(0, 0, r);
    let norm = a.frobenius_norm();
    let diff = apply_q_block(v, t, &rr, false, ops)?.sub(a)?.frobenius_norm();
    let residual = if norm > 0.0 { diff / norm } else { diff };

    let q1 = apply_q_block(v, t, &Matrix::eye(m, n), false, ops)?;
    let leading = local_mm_tn(&q1, &q1, ops)?.sub(&Matrix::identity(n))?.frobenius_norm();
    // QᵀQ − I = −V·K·Vᵀ with K = T + Tᵀ − Tᵀ·VᵀV·T, and ‖V·K·Vᵀ‖ = ‖Lᵀ·K·L‖ for VᵀV = L·Lᵀ
    let g = local_mm_tn(v, v, ops)?;
    let tgt = local_mm_tn(t, &local_mm(&g, t, ops)?, ops)?;
    let k = t.add(&t.transpose())?.sub(&tgt)?;
    let l = cholesky_lower(&g)?;
    let exact = local_mm(&local_mm_tn(&l, &k, ops)?, &l, ops)?.frobenius_norm();

    let oracle = local_householder_qr(a, ops)?.r;
    let signs: Vec<f64> = (0..n)
        .map(|i| {
            let dot: f64 = r.row(i).iter().zip(oracle.row(i)).map(|(x, y)| x * y).sum();
            if dot < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let onorm = oracle.frobenius_norm();
    let dev = r.scale_rows(&signs).sub(&oracle)?.frobenius_norm();
    let r_deviation = if onorm > 0.0 { dev / onorm } else { dev };
    Ok(Verification { residual, orthogonality: leading.max(exact), r_deviation })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollectiveKind {
    Scatter,
    Gather,
    Broadcast,
    Reduce,
    AllGather,
    ReduceScatter,
    AllReduce,
    AllToAll,
    AllToAllTwoPhase,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 9] = [
        CollectiveKind::Scatter,
        CollectiveKind::Gather,
        CollectiveKind::Broadcast,
        CollectiveKind::Reduce,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
        CollectiveKind::AllReduce,
        CollectiveKind::AllToAll,
        CollectiveKind::AllToAllTwoPhase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Scatter => "scatter",
            CollectiveKind::Gather => "gather",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::Reduce => "reduce",
            CollectiveKind::AllGather => "allgather",
            CollectiveKind::ReduceScatter => "reducescatter",
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::AllToAll => "alltoall",
            CollectiveKind::AllToAllTwoPhase => "alltoall2",
        }
    }

    /// Whether the kind has a binomial and a bidirectional variant.
    pub fn has_variants(self) -> bool {
        matches!(self, CollectiveKind::Broadcast | CollectiveKind::Reduce | CollectiveKind::AllReduce)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Tsqr,
    Qr1d,
    Qr3d,
    Mm3d,
    Collective(CollectiveKind),
}

impl Algorithm {
    pub fn is_qr(self) -> bool {
        matches!(self, Algorithm::Tsqr | Algorithm::Qr1d | Algorithm::Qr3d)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Tsqr => f.write_str("tsqr"),
            Algorithm::Qr1d => f.write_str("qr1d"),
            Algorithm::Qr3d => f.write_str("qr3d"),
            Algorithm::Mm3d => f.write_str("mm3d"),
            Algorithm::Collective(k) => write!(f, "collective:{}", k.name()),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "tsqr" => Algorithm::Tsqr,
            "qr1d" => Algorithm::Qr1d,
            "qr3d" => Algorithm::Qr3d,
            "mm3d" => Algorithm::Mm3d,
            _ => {
                let kind = s.strip_prefix("collective:").and_then(|k| CollectiveKind::ALL.into_iter().find(|c| c.name() == k));
                Algorithm::Collective(kind.ok_or_else(|| Error::Parse(format!("unknown algorithm '{s}'")))?)
            }
        })
    }
}

/// One experiment. QR algorithms factor an `m×n` instance; `mm3d` multiplies
/// `m×n` by `n×n`; collectives move `n`-word blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub algorithm: Algorithm,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub b: Option<usize>,
    pub b_star: Option<usize>,
    pub seed: u64,
    pub costs: CostParams,
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm, m: usize, n: usize, p: usize) -> Self {
        ExperimentConfig { m, n, p, algorithm, delta: None, epsilon: None, b: None, b_star: None, seed: 0, costs: CostParams::UNIT }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self
    }

    pub fn with_b(mut self, b: usize) -> Self {
        self.b = Some(b);
        self
    }

    pub fn with_b_star(mut self, b_star: usize) -> Self {
        self.b_star = Some(b_star);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algorithm: String,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub b: Option<usize>,
    pub b_star: Option<usize>,
    pub seed: u64,
    pub costs: CostParams,
    pub cost: CostVector,
    pub makespan: f64,
    pub residual: Option<f64>,
    pub orthogonality: Option<f64>,
    pub r_deviation: Option<f64>,
    pub leaves: Option<usize>,
    pub warnings: Vec<String>,
}

impl ReportRow {
    /// Whether the QR quality checks pass; non-QR rows always pass.
    pub fn passes(&self) -> bool {
        [self.residual, self.orthogonality].iter().all(|x| x.is_none_or(|v| v <= QR_TOLERANCE))
    }

    fn cells(&self) -> Vec<(&'static str, Cell)> {
        let opt_f = |x: Option<f64>| x.map_or(Cell::Null, Cell::Float);
        let opt_u = |x: Option<usize>| x.map_or(Cell::Null, |v| Cell::Int(v as u64));
        vec![
            ("algorithm", Cell::Str(self.algorithm.clone())),
            ("m", Cell::Int(self.m as u64)),
            ("n", Cell::Int(self.n as u64)),
            ("p", Cell::Int(self.p as u64)),
            ("delta", opt_f(self.delta)),
            ("epsilon", opt_f(self.epsilon)),
            ("b", opt_u(self.b)),
            ("b_star", opt_u(self.b_star)),
            ("seed", Cell::Int(self.seed)),
            ("gamma", Cell::Float(self.costs.gamma)),
            ("beta", Cell::Float(self.costs.beta)),
            ("alpha", Cell::Float(self.costs.alpha)),
            ("ops", Cell::Int(self.cost.ops)),
            ("words", Cell::Int(self.cost.words)),
            ("messages", Cell::Int(self.cost.messages)),
            ("makespan", Cell::Float(self.makespan)),
            ("residual", opt_f(self.residual)),
            ("orthogonality", opt_f(self.orthogonality)),
            ("r_deviation", opt_f(self.r_deviation)),
            ("leaves", opt_u(self.leaves)),
            ("warnings", Cell::Str(self.warnings.join("; "))),
        ]
    }
}

enum Cell {
    Str(String),
    Int(u64),
    Float(f64),
    Null,
}

fn float17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Column names of [`write_csv`], in order.
pub const CSV_COLUMNS: [&str; 21] = [
    "algorithm", "m", "n", "p", "delta", "epsilon", "b", "b_star", "seed", "gamma", "beta", "alpha", "ops", "words", "messages",
    "makespan", "residual", "orthogonality", "r_deviation", "leaves", "warnings",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with a fixed header; floats carry 17 significant digits, absent values are empty.
pub fn write_csv<W: Write>(rows: &[ReportRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for row in rows {
        let line: Vec<String> = row
            .cells()
            .into_iter()
            .map(|(_, c)| match c {
                Cell::Str(s) => csv_field(&s),
                Cell::Int(v) => v.to_string(),
                Cell::Float(x) => float17(x),
                Cell::Null => String::new(),
            })
            .collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// One JSON object per row, keys in [`CSV_COLUMNS`] order.
pub fn write_jsonl<W: Write>(rows: &[ReportRow], mut w: W) -> Result<()> {
    for row in rows {
        let fields: Vec<String> = row
            .cells()
            .into_iter()
            .map(|(k, c)| {
                let v = match c {
                    Cell::Str(s) => serde_json::to_string(&s)?,
                    Cell::Int(v) => v.to_string(),
                    Cell::Float(x) if x.is_finite() => float17(x),
                    Cell::Float(_) | Cell::Null => "null".to_string(),
                };
                Ok(format!("\"{k}\":{v}"))
            })
            .collect::<Result<_>>()?;
        writeln!(w, "{{{}}}", fields.join(","))?;
    }
    Ok(())
}

/// A report row together with the trace it was measured from.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub row: ReportRow,
    pub trace: Trace,
}

struct Outcome {
    verification: Option<Verification>,
    leaves: Option<usize>,
    warnings: Vec<String>,
    b: Option<usize>,
    b_star: Option<usize>,
    delta: Option<f64>,
    epsilon: Option<f64>,
}

impl Outcome {
    fn plain() -> Self {
        Outcome { verification: None, leaves: None, warnings: Vec::new(), b: None, b_star: None, delta: None, epsilon: None }
    }
}

/// Runs one experiment and keeps its trace.
pub fn run_traced(config: &ExperimentConfig) -> Result<Experiment> {
    let p = config.p;
    if p == 0 {
        return Err(Error::NoProcessors);
    }
    let mut m = Machine::with_payload_retention(p, false)?;
    let out = match config.algorithm {
        Algorithm::Tsqr | Algorithm::Qr1d | Algorithm::Qr3d => run_qr(&mut m, config)?,
        Algorithm::Mm3d => run_mm3d(&mut m, config)?,
        Algorithm::Collective(kind) => {
            run_collective(&mut m, kind, Variant::Auto, config.n, config.seed)?;
            Outcome::plain()
        }
    };
    let trace = m.into_trace();
    let v = out.verification;
    let row = ReportRow {
        algorithm: config.algorithm.to_string(),
        m: config.m,
        n: config.n,
        p,
        delta: out.delta,
        epsilon: out.epsilon,
        b: out.b,
        b_star: out.b_star,
        seed: config.seed,
        costs: config.costs,
        cost: trace.critical_path_counts(),
        makespan: trace.makespan(&config.costs),
        residual: v.map(|v| v.residual),
        orthogonality: v.map(|v| v.orthogonality),
        r_deviation: v.map(|v| v.r_deviation),
        leaves: out.leaves,
        warnings: out.warnings,
    };
    Ok(Experiment { row, trace })
}

/// Small experiments whose traces are kept as regression fixtures.
pub fn golden_configs() -> Vec<ExperimentConfig> {
    let mut v = vec![
        ExperimentConfig::new(Algorithm::Tsqr, 32, 4, 4).with_seed(1),
        ExperimentConfig::new(Algorithm::Qr1d, 48, 8, 4).with_b(2).with_seed(2),
        ExperimentConfig::new(Algorithm::Qr3d, 40, 8, 4).with_b(4).with_b_star(2).with_seed(3),
        ExperimentConfig::new(Algorithm::Mm3d, 8, 8, 8).with_seed(4),
    ];
    for kind in CollectiveKind::ALL {
        v.push(ExperimentConfig::new(Algorithm::Collective(kind), 1, 3, 5).with_seed(5));
    }
    v
}

pub fn golden_file_name(c: &ExperimentConfig) -> String {
    format!("{}_{}x{}_p{}.json", c.algorithm.to_string().replace(':', "-"), c.m, c.n, c.p)
}

/// Runs one experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportRow> {
    run_traced(config).map(|e| e.row)
}

/// Runs experiments in parallel; rows come back in config order.
pub fn sweep(configs: &[ExperimentConfig]) -> Result<Vec<ReportRow>> {
    configs.par_iter().map(run_experiment).collect()
}

/// [`sweep`] keeping every trace.
pub fn sweep_traced(configs: &[ExperimentConfig]) -> Result<Vec<Experiment>> {
    configs.par_iter().map(run_traced).collect()
}

fn run_qr(m: &mut Machine, c: &ExperimentConfig) -> Result<Outcome> {
    let a = generate_instance(c.m, c.n, c.seed)?;
    let p = c.p;
    let procs = m.all_procs();
    let mut out = Outcome::plain();
    let (v, t, r) = match c.algorithm {
        Algorithm::Qr3d => {
            let delta = c.delta.unwrap_or(0.5);
            let epsilon = c.epsilon.unwrap_or(1.0);
            let tp = params_3d(c.m, c.n, p, delta, epsilon);
            let b = c.b.unwrap_or(tp.b).clamp(1, c.n);
            let bs = c.b_star.unwrap_or(tp.b_star).clamp(1, b);
            let d = DistMatrix::row_cyclic(&a, &procs, 0, p)?;
            let (f, stats) = qr_3d_eg(m, &d, &procs, 0, b, bs)?;
            (out.delta, out.epsilon, out.b, out.b_star) = (Some(delta), Some(epsilon), Some(b), Some(bs));
            out.leaves = Some(stats.leaves);
            out.warnings = stats.warnings;
            if stats.mm3d_hypothesis_misses > 0 {
                out.warnings.push(format!("{} of {} 3D products outside the grid hypothesis", stats.mm3d_hypothesis_misses, stats.mm3d_calls));
            }
            (f.v.to_global(), f.t.to_global(), f.r.to_global())
        }
        alg => {
            let active = p.min(c.m / c.n).max(1);
            if active < p {
                out.warnings.push(format!("1D layout uses {active} of {p} processors (P ≤ m/n)"));
            }
            let procs = &procs[..active];
            let d = DistMatrix::block_row(&a, procs, &balanced_sizes(c.m, active), p)?;
            let f = if alg == Algorithm::Tsqr {
                out.leaves = Some(1);
                tsqr(m, &d, procs, 0)?
            } else {
                let epsilon = c.epsilon.unwrap_or(1.0);
                let b = c.b.unwrap_or_else(|| params_1d(c.n, active, epsilon)).clamp(1, c.n);
                (out.epsilon, out.b) = (c.b.is_none().then_some(epsilon), Some(b));
                let (f, stats) = qr_1d_eg(m, &d, procs, 0, b)?;
                out.leaves = Some(stats.leaves);
                out.warnings.extend(stats.warnings);
                f
            };
            (f.v.to_global(), f.t, f.r)
        }
    };
    out.verification = Some(verify_qr(&a, &v, &t, &r)?);
    Ok(out)
}

fn run_mm3d(m: &mut Machine, c: &ExperimentConfig) -> Result<Outcome> {
    let a = generate_instance(c.m, c.n, c.seed)?;
    let b = generate_instance(c.n, c.n, c.seed.wrapping_add(1))?;
    let layout = GridLayout::new(fit_grid(c.m, c.n, c.n, c.p), c.m, c.n, c.n);
    let procs = m.all_procs();
    let g = layout.active();
    let a_sh = (0..g).map(|x| layout.shard_values(Operand::A, x, &a)).collect();
    let b_sh = (0..g).map(|x| layout.shard_values(Operand::B, x, &b)).collect();
    let got = layout.assemble_c(&mm_3d(m, &procs, &layout, a_sh, b_sh)?);
    let want = local_mm(&a, &b, &mut OpCount::default())?;
    let err = got.sub(&want)?.frobenius_norm() / want.frobenius_norm().max(f64::MIN_POSITIVE);
    if err > 1e-12 {
        return Err(Error::Precondition(format!("3D product deviates from the local product by {err:e}")));
    }
    let mut out = Outcome::plain();
    if crate::matmul::choose_grid(c.m, c.n, c.n, c.p).is_err() {
        out.warnings.push(format!("grid hypothesis fails; using {:?}", layout.shape));
    }
    Ok(out)
}

fn close(x: &[f64], y: &[f64]) -> bool {
    x.len() == y.len() && x.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()))
}

/// Runs one collective on all `p` processors of `m` with `b`-word blocks from
/// `seed`, checking the delivered data against a direct computation.
pub fn run_collective(m: &mut Machine, kind: CollectiveKind, variant: Variant, b: usize, seed: u64) -> Result<()> {
    let procs = m.all_procs();
    let p = procs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = || -> Vec<f64> { (0..b).map(|_| rng.gen_range(-1.0..=1.0)).collect() };
    let blocks: Vec<Vec<f64>> = (0..p).map(|_| block()).collect();
    let matrix: Vec<Vec<Vec<f64>>> = (0..p).map(|_| (0..p).map(|_| block()).collect()).collect();
    let sum = |v: &[Vec<f64>]| -> Vec<f64> { (0..b).map(|i| v.iter().map(|x| x[i]).sum()).collect() };
    let ok = match kind {
        CollectiveKind::Scatter => collectives::scatter(m, &procs, 0, blocks.clone())? == blocks,
        CollectiveKind::Gather => collectives::gather(m, &procs, 0, blocks.clone())? == blocks,
        CollectiveKind::Broadcast => collectives::broadcast(m, &procs, 0, blocks[0].clone(), variant)?.iter().all(|x| *x == blocks[0]),
        CollectiveKind::Reduce => close(&collectives::reduce(m, &procs, 0, blocks.clone(), variant)?, &sum(&blocks)),
        CollectiveKind::AllGather => collectives::all_gather(m, &procs, blocks.clone())?.iter().all(|x| *x == blocks),
        CollectiveKind::ReduceScatter => {
            let got = collectives::reduce_scatter(m, &procs, matrix.clone())?;
            (0..p).all(|q| close(&got[q], &sum(&matrix.iter().map(|row| row[q].clone()).collect::<Vec<_>>())))
        }
        CollectiveKind::AllReduce => {
            let want = sum(&blocks);
            collectives::all_reduce(m, &procs, blocks, variant)?.iter().all(|x| close(x, &want))
        }
        CollectiveKind::AllToAll | CollectiveKind::AllToAllTwoPhase => {
            let got = if kind == CollectiveKind::AllToAll {
                collectives::all_to_all_index(m, &procs, matrix.clone())?
            } else {
                collectives::all_to_all_two_phase(m, &procs, matrix.clone())?.0
            };
            (0..p).all(|q| (0..p).all(|s| got[q][s] == matrix[s][q]))
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{} delivered wrong data", kind.name())))
    }
}

/// Measured critical-path costs of one collective.
pub fn measure_collective(kind: CollectiveKind, variant: Variant, p: usize, b: usize, seed: u64) -> Result<CostVector> {
    let mut m = Machine::with_payload_retention(p, false)?;
    run_collective(&mut m, kind, variant, b, seed)?;
    Ok(m.critical_path_counts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible() {
        assert_eq!(generate_instance(4, 2, 7).unwrap(), generate_instance(4, 2, 7).unwrap());
        assert_ne!(generate_instance(4, 2, 7).unwrap(), generate_instance(4, 2, 8).unwrap());
        assert!(generate_instance(2, 4, 1).is_err());
        let one = generate_instance(1, 1, 3).unwrap();
        assert_eq!(one.shape(), (1, 1));
        assert!(one[(0, 0)].abs() <= 1.0);
    }

    #[test]
    fn verify_identity_and_corruption() {
        let n = 4;
        // V = I₄, T = 0 gives Q = I; A = I has R = I
        let ok = verify_qr(&Matrix::identity(n), &Matrix::identity(n), &Matrix::zeros(n, n), &Matrix::identity(n)).unwrap();
        assert!(ok.residual == 0.0 && ok.orthogonality == 0.0);
        assert!(ok.r_deviation <= 1e-15);
        let a = generate_instance(12, 4, 1).unwrap();
        let f = local_householder_qr(&a, &mut OpCount::default()).unwrap();
        let good = verify_qr(&a, &f.v, &f.t, &f.r).unwrap();
        assert!(good.residual <= 1e-14 && good.orthogonality <= 1e-14 && good.r_deviation == 0.0);
        let mut bad_r = f.r.clone();
        bad_r[(0, 1)] += 0.5;
        assert!(verify_qr(&a, &f.v, &f.t, &bad_r).unwrap().residual > 1e-3);
        let mut bad_t = f.t.clone();
        bad_t[(1, 1)] *= 1.01;
        assert!(verify_qr(&a, &f.v, &bad_t, &f.r).unwrap().orthogonality > 1e-4);
        assert!(verify_qr(&a, &f.v, &f.t, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn algorithm_names_round_trip() {
        let all = [Algorithm::Tsqr, Algorithm::Qr1d, Algorithm::Qr3d, Algorithm::Mm3d]
            .into_iter()
            .chain(CollectiveKind::ALL.into_iter().map(Algorithm::Collective));
        for alg in all {
            assert_eq!(alg.to_string().parse::<Algorithm>().unwrap(), alg);
        }
        assert!("qr2d".parse::<Algorithm>().is_err());
    }

    #[test]
    fn experiments() {
        let row = run_experiment(&ExperimentConfig::new(Algorithm::Tsqr, 64, 8, 4)).unwrap();
        assert!(row.passes());
        assert_eq!(row.cost.messages % 2, 0);
        let q1 = run_experiment(&ExperimentConfig::new(Algorithm::Qr1d, 64, 8, 4).with_b(8)).unwrap();
        assert_eq!(q1.cost, row.cost);
        let q3 = run_experiment(&ExperimentConfig::new(Algorithm::Qr3d, 32, 8, 1).with_seed(3)).unwrap();
        assert!(q3.passes());
        assert_eq!((q3.cost.words, q3.cost.messages), (0, 0));
        let mm = run_experiment(&ExperimentConfig::new(Algorithm::Mm3d, 16, 16, 8)).unwrap();
        assert!(mm.residual.is_none() && mm.cost.words > 0);
        for kind in CollectiveKind::ALL {
            run_experiment(&ExperimentConfig::new(Algorithm::Collective(kind), 1, 5, 6)).unwrap();
        }
        let narrow = run_experiment(&ExperimentConfig::new(Algorithm::Tsqr, 16, 8, 4)).unwrap();
        assert!(narrow.passes() && narrow.cost.messages == 3 && narrow.warnings.len() == 1);
        assert!(run_experiment(&ExperimentConfig::new(Algorithm::Tsqr, 4, 8, 4)).is_err());
    }

    #[test]
    fn sweep_rows_and_formats() {
        let configs: Vec<_> = [0.0, 0.5, 1.0].iter().map(|&e| ExperimentConfig::new(Algorithm::Qr1d, 128, 16, 4).with_epsilon(e)).collect();
        let rows = sweep(&configs).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(), vec![Some(0.0), Some(0.5), Some(1.0)]);
        let mut csv = Vec::new();
        write_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);
        let mut again = Vec::new();
        write_csv(&sweep(&configs).unwrap(), &mut again).unwrap();
        assert_eq!(text.as_bytes(), &again[..]);
        let mut jl = Vec::new();
        write_jsonl(&rows, &mut jl).unwrap();
        for line in String::from_utf8(jl).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["algorithm"], "qr1d");
        }
    }

    #[test]
    fn collectives_match_recurrences() {
        for p in [2, 3, 7, 8] {
            for kind in CollectiveKind::ALL {
                let variants: &[Variant] = if kind.has_variants() { &[Variant::Binomial, Variant::Bidirectional] } else { &[Variant::Auto] };
                for &v in variants {
                    if let Some(want) = recurrence::collective_cost(kind, v, p, 5) {
                        assert_eq!(measure_collective(kind, v, p, 5, 1).unwrap(), want, "{kind:?} {v:?} P={p}");
                    }
                }
            }
        }
    }
}
