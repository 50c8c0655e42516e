use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use caqr::collectives::{ceil_log2, Variant};
use caqr::harness::recurrence::collective_cost;
use caqr::harness::{golden_configs, golden_file_name, measure_collective, run_traced, sweep, write_csv, write_jsonl, Algorithm, CollectiveKind, ExperimentConfig, ReportRow};
use caqr::sim::CostParams;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "caqr-sim", version, about = "Simulated communication-avoiding QR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its report row.
    Run {
        #[command(flatten)]
        grid: Grid,
        /// Also write the trace JSON here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the cartesian product of comma-separated flag values.
    Sweep {
        #[command(flatten)]
        grid: Grid,
    },
    /// Compare measured collective costs with the recurrence evaluator.
    VerifyCollectives {
        #[arg(long, default_value_t = 32)]
        max_p: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5,17")]
        blocks: Vec<usize>,
    },
    /// Write or check the golden trace set.
    GoldenTrace {
        #[arg(long, conflicts_with = "check", required_unless_present = "check")]
        out: Option<PathBuf>,
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Args)]
struct Grid {
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<usize>,
    /// tsqr, qr1d, qr3d, mm3d or collective:<kind>
    #[arg(long, value_delimiter = ',', default_value = "tsqr")]
    algo: Vec<Algorithm>,
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    b: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    bstar: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn optional<T: Copy>(v: &[T]) -> Vec<Option<T>> {
    if v.is_empty() {
        vec![None]
    } else {
        v.iter().copied().map(Some).collect()
    }
}

impl Grid {
    fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let costs = CostParams::new(self.gamma, self.beta, self.alpha)?;
        let mut out = Vec::new();
        for &algo in &self.algo {
            for &m in &self.m {
                for &n in &self.n {
                    for &p in &self.p {
                        for delta in optional(&self.delta) {
                            for epsilon in optional(&self.epsilon) {
                                for b in optional(&self.b) {
                                    for b_star in optional(&self.bstar) {
                                        for &seed in &self.seed {
                                            let mut c = ExperimentConfig::new(algo, m, n, p).with_seed(seed);
                                            c.delta = delta;
                                            c.epsilon = epsilon;
                                            c.b = b;
                                            c.b_star = b_star;
                                            c.costs = costs;
                                            out.push(c);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn emit(rows: &[ReportRow], format: Format) -> Result<ExitCode> {
    let mut stdout = io::stdout().lock();
    match format {
        Format::Csv => write_csv(rows, &mut stdout)?,
        Format::Jsonl => write_jsonl(rows, &mut stdout)?,
    }
    stdout.flush()?;
    for row in rows {
        for w in &row.warnings {
            eprintln!("warning: {} m={} n={} p={}: {w}", row.algorithm, row.m, row.n, row.p);
        }
    }
    let failed = rows.iter().filter(|r| !r.passes()).count();
    if failed > 0 {
        eprintln!("{failed} run(s) exceeded the residual or orthogonality tolerance");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_collectives(max_p: usize, blocks: &[usize]) -> Result<ExitCode> {
    let (mut checked, mut bad) = (0, 0);
    for p in 2..=max_p {
        for &b in blocks {
            for kind in CollectiveKind::ALL {
                let variants: &[Variant] = if kind.has_variants() { &[Variant::Binomial, Variant::Bidirectional] } else { &[Variant::Auto] };
                for &v in variants {
                    let Some(want) = collective_cost(kind, v, p, b) else { continue };
                    let got = measure_collective(kind, v, p, b, (p * 100 + b) as u64)?;
                    let tree = matches!(kind, CollectiveKind::Scatter | CollectiveKind::Gather)
                        || (matches!(kind, CollectiveKind::Broadcast | CollectiveKind::Reduce) && v == Variant::Binomial);
                    checked += 1;
                    if got != want || (tree && got.messages != ceil_log2(p) as u64) {
                        bad += 1;
                        println!("MISMATCH {} {v:?} P={p} B={b}: measured {got:?}, expected {want:?}", kind.name());
                    }
                }
            }
        }
    }
    println!("{checked} cases checked, {bad} mismatches");
    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn golden(out: Option<&Path>, check: Option<&Path>) -> Result<ExitCode> {
    let mut drift = 0;
    for c in golden_configs() {
        let json = run_traced(&c)?.trace.to_json(&c.costs)?;
        let name = golden_file_name(&c);
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(&name), &json).with_context(|| format!("writing {name}"))?;
            println!("wrote {name}");
        } else if let Some(dir) = check {
            let stored = fs::read_to_string(dir.join(&name)).with_context(|| format!("reading {name}"))?;
            if stored == json {
                println!("ok {name}");
            } else {
                drift += 1;
                println!("DIFFERS {name}");
            }
        }
    }
    Ok(if drift == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { grid, trace } => {
            let configs = grid.configs()?;
            let [config] = configs.as_slice() else {
                bail!("run takes one value per flag; use sweep for {} combinations", configs.len());
            };
            let exp = run_traced(config)?;
            if let Some(path) = trace {
                fs::write(&path, exp.trace.to_json(&config.costs)?).with_context(|| format!("writing {}", path.display()))?;
            }
            emit(&[exp.row], grid.format)
        }
        Command::Sweep { grid } => emit(&sweep(&grid.configs()?)?, grid.format),
        Command::VerifyCollectives { max_p, blocks } => verify_collectives(max_p, &blocks),
        Command::GoldenTrace { out, check } => golden(out.as_deref(), check.as_deref()),
    }
}
