//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::time::Instant;

use caqr::caqr::{qr_1d_eg, qr_3d_eg, redistribute_base_case};
use caqr::collectives::{all_to_all_index, all_to_all_two_phase, balanced_sizes, ceil_log2, two_phase_bounds, Variant};
use caqr::dense::{kernel_from_basis, local_householder_qr, local_mm, local_mm_tn, signed_lu, HouseholderFactors, Matrix};
use caqr::harness::recurrence::{collective_cost, exchange_word_bound};
use caqr::harness::{generate_instance, measure_collective, run_experiment, sweep, sweep_traced, write_csv, Algorithm, CollectiveKind, ExperimentConfig};
use caqr::matmul::DistMatrix;
use caqr::sim::{CostParams, Machine, OpCount};
use caqr::tsqr::tsqr;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const SHAPES: [(usize, usize, usize); 3] = [(64, 16, 4), (256, 32, 8), (512, 64, 16)];
const SEEDS: [u64; 3] = [1, 2, 3];

fn numeric_configs() -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for (m, n, p) in SHAPES {
        for seed in SEEDS {
            out.push(ExperimentConfig::new(Algorithm::Tsqr, m, n, p).with_seed(seed));
            for eps in [0.0, 1.0] {
                out.push(ExperimentConfig::new(Algorithm::Qr1d, m, n, p).with_seed(seed).with_epsilon(eps));
            }
            for delta in [0.5, 2.0 / 3.0] {
                out.push(ExperimentConfig::new(Algorithm::Qr3d, m, n, p).with_seed(seed).with_delta(delta).with_epsilon(1.0));
            }
        }
    }
    out
}

fn numerics() -> Outcome {
    let configs = numeric_configs();
    let rows = sweep(&configs).map_err(err)?;
    let (mut res, mut orth, mut dev) = (0.0f64, 0.0f64, 0.0f64);
    for row in &rows {
        let (r, o, d) = (row.residual.unwrap_or(f64::NAN), row.orthogonality.unwrap_or(f64::NAN), row.r_deviation.unwrap_or(f64::NAN));
        ensure!(r <= 1e-10 && o <= 1e-10 && d <= 1e-8, "{} m={} n={} P={} seed={}: residual {r:e}, orthogonality {o:e}, R deviation {d:e}", row.algorithm, row.m, row.n, row.p, row.seed);
        (res, orth, dev) = (res.max(r), orth.max(o), dev.max(d));
    }
    Ok(format!("{} runs; max residual {res:.1e}, orthogonality {orth:.1e}, R deviation {dev:.1e}", rows.len()))
}

fn collectives() -> Outcome {
    let mut checked = 0;
    for p in 2..=32usize {
        for b in [1usize, 5, 17] {
            for kind in CollectiveKind::ALL {
                let variants: &[Variant] = if kind.has_variants() { &[Variant::Binomial, Variant::Bidirectional] } else { &[Variant::Auto] };
                for &v in variants {
                    let Some(want) = collective_cost(kind, v, p, b) else { continue };
                    let got = measure_collective(kind, v, p, b, (p * 100 + b) as u64).map_err(err)?;
                    ensure!(got == want, "{} {v:?} P={p} B={b}: measured {got:?}, recurrence {want:?}", kind.name());
                    let binomial = matches!(kind, CollectiveKind::Scatter | CollectiveKind::Gather)
                        || (matches!(kind, CollectiveKind::Broadcast | CollectiveKind::Reduce) && v == Variant::Binomial);
                    if binomial {
                        ensure!(got.messages == ceil_log2(p) as u64, "{} P={p}: {} messages", kind.name(), got.messages);
                    }
                    let bound = match kind {
                        CollectiveKind::Scatter | CollectiveKind::Gather => Some(((p - 1) * b) as u64),
                        CollectiveKind::AllGather | CollectiveKind::ReduceScatter => Some(exchange_word_bound(p, b)),
                        _ => None,
                    };
                    if let Some(bound) = bound {
                        ensure!(got.words <= bound, "{} P={p} B={b}: {} words above the bound {bound}", kind.name(), got.words);
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} (collective, variant, P, B) cases match exactly"))
}

fn ratio_spread(v: &[f64]) -> f64 {
    let hi = v.iter().copied().fold(f64::MIN, f64::max);
    let lo = v.iter().copied().fold(f64::MAX, f64::min);
    hi / lo
}

fn tsqr_configs() -> Vec<ExperimentConfig> {
    [2, 4, 8, 16].iter().map(|&p| ExperimentConfig::new(Algorithm::Tsqr, 64 * p, 8, p).with_seed(7)).collect()
}

fn tsqr_scaling() -> Outcome {
    let rows = sweep(&tsqr_configs()).map_err(err)?;
    let n2 = 64.0;
    let words: Vec<f64> = rows.iter().map(|r| r.cost.words as f64 / (n2 * (r.p as f64).log2())).collect();
    let msgs: Vec<f64> = rows.iter().map(|r| r.cost.messages as f64 / (r.p as f64).log2()).collect();
    let (sw, sm) = (ratio_spread(&words), ratio_spread(&msgs));
    ensure!(sw <= 2.0 && sm <= 2.0, "spreads {sw:.3} (words {words:?}) and {sm:.3} (messages {msgs:?})");
    Ok(format!("words/(n² log P) spread {sw:.3}, messages/log P spread {sm:.3}"))
}

fn tradeoff_1d_configs() -> Vec<ExperimentConfig> {
    [0.0, 1.0].iter().map(|&e| ExperimentConfig::new(Algorithm::Qr1d, 4096, 64, 16).with_seed(11).with_epsilon(e)).collect()
}

fn tradeoff_1d() -> Outcome {
    let rows = sweep(&tradeoff_1d_configs()).map_err(err)?;
    let (e0, e1) = (&rows[0], &rows[1]);
    let n2 = 64.0 * 64.0;
    ensure!(e1.cost.words < e0.cost.words, "words ε=1 {} not below ε=0 {}", e1.cost.words, e0.cost.words);
    ensure!(e1.cost.messages > e0.cost.messages, "messages ε=1 {} not above ε=0 {}", e1.cost.messages, e0.cost.messages);
    ensure!(e1.cost.words as f64 / n2 <= e0.cost.words as f64 / n2, "normalized words");
    ensure!(e0.passes() && e1.passes(), "numerical checks failed");
    Ok(format!(
        "ε=0: {} words, {} messages (b={}); ε=1: {} words, {} messages (b={})",
        e0.cost.words,
        e0.cost.messages,
        e0.b.unwrap_or(0),
        e1.cost.words,
        e1.cost.messages,
        e1.b.unwrap_or(0)
    ))
}

fn tradeoff_3d_configs() -> Vec<ExperimentConfig> {
    [0.5, 2.0 / 3.0].iter().map(|&d| ExperimentConfig::new(Algorithm::Qr3d, 512, 512, 8).with_seed(13).with_delta(d).with_epsilon(1.0)).collect()
}

fn tradeoff_3d() -> Outcome {
    let rows = sweep(&tradeoff_3d_configs()).map_err(err)?;
    let (h, t) = (&rows[0], &rows[1]);
    ensure!(h.passes() && t.passes(), "numerical checks failed");
    ensure!(t.cost.words <= h.cost.words, "words δ=2/3 {} above δ=1/2 {}", t.cost.words, h.cost.words);
    ensure!(t.cost.messages >= h.cost.messages, "messages δ=2/3 {} below δ=1/2 {}", t.cost.messages, h.cost.messages);
    Ok(format!(
        "δ=1/2: {} words, {} messages (b={}, b*={}); δ=2/3: {} words, {} messages (b={}, b*={})",
        h.cost.words,
        h.cost.messages,
        h.b.unwrap_or(0),
        h.b_star.unwrap_or(0),
        t.cost.words,
        t.cost.messages,
        t.b.unwrap_or(0),
        t.b_star.unwrap_or(0)
    ))
}

fn mm_config() -> ExperimentConfig {
    ExperimentConfig::new(Algorithm::Mm3d, 64, 64, 8).with_seed(17)
}

fn mm_bandwidth() -> Outcome {
    let row = run_experiment(&mm_config()).map_err(err)?;
    let (i, j, k, p) = (64usize, 64usize, 64usize, 8usize);
    // ρ = (IJK/P)^{1/3} = 32 gives a 2×2×2 grid
    let (q, r, s) = (2usize, 2usize, 2usize);
    let (iq, jr, ks) = (i.div_ceil(q), j.div_ceil(r), k.div_ceil(s));
    let bound = (r - 1) * (iq * ks).div_ceil(r) + (q - 1) * (jr * ks).div_ceil(q) + (s - 1) * (iq * jr).div_ceil(s);
    let scale = ((i * j * k) as f64 / p as f64).powf(2.0 / 3.0);
    let c = bound as f64 / scale;
    ensure!(row.cost.words <= bound as u64, "{} words above {bound}", row.cost.words);
    ensure!(c <= 6.0, "constant {c}");
    Ok(format!("{} words ≤ {bound} = {c:.2}·(IJK/P)^(2/3)", row.cost.words))
}

fn structural() -> Outcome {
    let costs = CostParams::UNIT;
    for (m, n, p) in [(64, 16, 4), (256, 32, 8)] {
        let a = generate_instance(m, n, 5).map_err(err)?;
        let procs: Vec<usize> = (0..p).collect();
        let d = DistMatrix::block_row(&a, &procs, &balanced_sizes(m, p), p).map_err(err)?;
        let mut m1 = Machine::new(p).map_err(err)?;
        tsqr(&mut m1, &d, &procs, 0).map_err(err)?;
        let mut m2 = Machine::new(p).map_err(err)?;
        qr_1d_eg(&mut m2, &d, &procs, 0, n).map_err(err)?;
        ensure!(m1.trace().to_json(&costs).map_err(err)? == m2.trace().to_json(&costs).map_err(err)?, "1D trace differs from TSQR at {m}x{n}, P={p}");
    }
    let mut parts = 0;
    for (m, n, p, bs) in [(256, 32, 8, 8), (480, 32, 16, 8), (96, 96, 8, 24)] {
        let a = generate_instance(m, n, 6).map_err(err)?;
        let procs: Vec<usize> = (0..p).collect();
        let d = DistMatrix::row_cyclic(&a, &procs, 0, p).map_err(err)?;
        let mut whole = Machine::new(p).map_err(err)?;
        qr_3d_eg(&mut whole, &d, &procs, 0, n, bs).map_err(err)?;

        let mut staged = Machine::new(p).map_err(err)?;
        let (moved, plan) = redistribute_base_case(&mut staged, &d, &procs, 0).map_err(err)?;
        let start = staged.mark();
        let (out, _) = qr_1d_eg(&mut staged, &moved, &plan.reps, 0, bs).map_err(err)?;
        let end = staged.mark();
        plan.reverse(&mut staged, &out).map_err(err)?;
        ensure!(whole.trace().to_json(&costs).map_err(err)? == staged.trace().to_json(&costs).map_err(err)?, "3D trace is not redistribution + 1D + reversal at {m}x{n}, P={p}");

        let mut alone = Machine::new(p).map_err(err)?;
        qr_1d_eg(&mut alone, &moved, &plan.reps, 0, bs).map_err(err)?;
        let middle = staged.trace().segment(start..end);
        ensure!(middle.to_json(&costs).map_err(err)? == alone.trace().to_json(&costs).map_err(err)?, "middle segment differs from a standalone 1D run");
        ensure!(start > 0 || plan.is_identity(), "redistribution recorded nothing");
        parts += 1;
    }
    Ok(format!("2 TSQR identities, {parts} 3D decompositions"))
}

fn full_sweep() -> Vec<ExperimentConfig> {
    let mut configs = numeric_configs();
    configs.extend(tsqr_configs());
    configs.extend(tradeoff_1d_configs());
    configs.extend(tradeoff_3d_configs());
    configs.push(mm_config());
    for kind in CollectiveKind::ALL {
        configs.push(ExperimentConfig::new(Algorithm::Collective(kind), 1, 5, 13).with_seed(19));
    }
    configs.push(ExperimentConfig::new(Algorithm::Qr1d, 256, 32, 8).with_b(32).with_seed(5));
    configs.push(ExperimentConfig::new(Algorithm::Qr3d, 480, 32, 16).with_b(32).with_b_star(8).with_seed(6));
    configs
}

fn sweep_bytes(configs: &[ExperimentConfig]) -> Result<(Vec<u8>, Vec<u8>), String> {
    let runs = sweep_traced(configs).map_err(err)?;
    let rows: Vec<_> = runs.iter().map(|e| e.row.clone()).collect();
    let mut csv = Vec::new();
    write_csv(&rows, &mut csv).map_err(err)?;
    let mut traces = Vec::new();
    for (e, c) in runs.iter().zip(configs) {
        traces.extend(e.trace.to_json(&c.costs).map_err(err)?.into_bytes());
        traces.push(b'\n');
    }
    Ok((csv, traces))
}

fn determinism() -> Outcome {
    let configs = full_sweep();
    let (csv1, tr1) = sweep_bytes(&configs)?;
    let (csv2, tr2) = sweep_bytes(&configs)?;
    ensure!(csv1 == csv2, "CSV differs between runs");
    ensure!(tr1 == tr2, "trace JSON differs between runs");
    Ok(format!("{} configs; {} CSV bytes, {} trace bytes identical", configs.len(), csv1.len(), tr1.len()))
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    generate_instance(rows.max(cols), cols, seed).expect("valid shape").row_block(0..rows)
}

fn properties() -> Outcome {
    let mut lu = runner(200);
    lu.run(&(1usize..=16, 0usize..=16, any::<u64>()), |(k, extra, seed)| {
        let w = local_householder_qr(&random_matrix(k + extra, k, seed), &mut OpCount::default())
            .and_then(|f| f.q_columns(k))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let x = w.row_block(0..k);
        let f = signed_lu(&x, &mut OpCount::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(f.min_pivot_slack >= -1e-12, "pivot slack {}", f.min_pivot_slack);
        let lu = local_mm(&f.l, &f.u, &mut OpCount::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut xs = x.clone();
        for (j, s) in f.s.iter().enumerate() {
            xs[(j, j)] += s;
        }
        let gap = lu.sub(&xs).map_err(|e| TestCaseError::fail(e.to_string()))?.max_abs();
        prop_assert!(gap <= 1e-12, "X + S − LU = {gap:e}");
        Ok(())
    })
    .map_err(|e| format!("signed_lu: {e}"))?;

    let mut kernel = runner(200);
    kernel
        .run(&(1usize..=12, 0usize..=12, any::<u64>()), |(n, extra, seed)| {
            let m = n + extra;
            let raw = random_matrix(m, n, seed);
            let v = Matrix::from_fn(m, n, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => raw[(i, j)],
                std::cmp::Ordering::Equal => 1.0,
                std::cmp::Ordering::Less => 0.0,
            });
            let t = kernel_from_basis(&v, &mut OpCount::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let f = HouseholderFactors { v, t, r: Matrix::zeros(n, n) };
            let q = f.q_columns(m).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let qtq = local_mm_tn(&q, &q, &mut OpCount::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let dev = qtq.sub(&Matrix::identity(m)).map_err(|e| TestCaseError::fail(e.to_string()))?.frobenius_norm();
            prop_assert!(dev <= 1e-12, "‖QᵀQ − I‖ = {dev:e}");
            Ok(())
        })
        .map_err(|e| format!("kernel_from_basis: {e}"))?;

    let mut a2a = runner(100);
    let spec = (1usize..=16).prop_flat_map(|p| proptest::collection::vec(proptest::collection::vec(0usize..=6, p), p));
    a2a.run(&(spec, any::<u64>()), |(sizes, seed)| {
        let p = sizes.len();
        let mut counter = seed as f64;
        let blocks: Vec<Vec<Vec<f64>>> = sizes
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&len| {
                        (0..len)
                            .map(|_| {
                                counter += 1.0;
                                counter
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let procs: Vec<usize> = (0..p).collect();
        let mut m1 = Machine::new(p).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let index = all_to_all_index(&mut m1, &procs, blocks.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut m2 = Machine::new(p).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (two, stats) = all_to_all_two_phase(&mut m2, &procs, blocks).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&index, &two);
        let (b1, b2) = two_phase_bounds(&sizes);
        prop_assert!(stats.first as f64 <= b1 + 1e-9 && stats.second as f64 <= b2 + 1e-9, "phase sizes {:?} above ({b1}, {b2})", stats);
        Ok(())
    })
    .map_err(|e| format!("two-phase AlltoAll: {e}"))?;
    Ok("200 signed LU, 200 kernel, 100 AlltoAll cases".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("numerical correctness", numerics),
        ("collective cost exactness", collectives),
        ("TSQR scaling", tsqr_scaling),
        ("1D tradeoff", tradeoff_1d),
        ("3D tradeoff", tradeoff_3d),
        ("3D multiplication bandwidth", mm_bandwidth),
        ("structural equivalences", structural),
        ("determinism", determinism),
        ("property suites", properties),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail} [{secs:.1}s]", k + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {e} [{secs:.1}s]", k + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
