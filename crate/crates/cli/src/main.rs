use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lmec_core::attention::{linear_attention, LinearAttentionSpec, OrderPolicy};
use lmec_core::bench::{self, run_latency_sweep, variant_specs, write_csv, BenchConfig};
use lmec_core::gradcheck::suite::{run_case, Case, SuiteOutcome};
use lmec_core::gradcheck::GradReport;
use lmec_core::kernels::{ActivationKind, PeKind};
use lmec_core::Rng;
use rayon::prelude::*;

const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
const EQUIVALENCE_LENGTHS: [usize; 5] = [1, 7, 64, 200, 1000];
const EQUIVALENCE_HEAD_DIMS: [usize; 2] = [4, 64];

#[derive(Parser)]
#[command(name = "lmec", version, about = "Linear attention benchmarks and numerical checks")]
struct Cli {
    /// Worker threads for gradcheck and equivalence. Benchmarks always time
    /// on one thread.
    #[arg(long, env = "LMEC_THREADS", default_value_t = 1, global = true)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Time attention variants over sequence lengths and emit CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "mrpe,lmape")]
        variants: Vec<PeKind>,
        #[arg(long, default_value = "elu")]
        activation: ActivationKind,
        /// One or more of left, right, dynamic.
        #[arg(long, value_delimiter = ',', default_value = "left,right")]
        order: Vec<OrderPolicy>,
        #[arg(long, value_delimiter = ',', default_value = "100,250,500,1000,2000")]
        seq_lens: Vec<usize>,
        /// Position count M of the position embeddings; longer sequences
        /// are rejected.
        #[arg(long, default_value_t = 2000)]
        max_len: usize,
        #[arg(long, default_value_t = bench::DESK_D_K)]
        dk: usize,
        #[arg(long, default_value_t = bench::DESK_HEADS)]
        heads: usize,
        #[arg(long, default_value_t = bench::DESK_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = bench::DESK_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = bench::DESK_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "on")]
        normalize: Switch,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare left- and right-product outputs for every variant.
    Equivalence {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        bail!("LMEC_THREADS must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Bench {
            variants,
            activation,
            order,
            seq_lens,
            max_len,
            dk,
            heads,
            batch,
            warmup,
            iters,
            seed,
            normalize,
            out,
        } => {
            let mut rng = Rng::new(seed);
            let mut specs = Vec::new();
            for o in order {
                specs.extend(variant_specs(
                    &variants,
                    activation,
                    o,
                    matches!(normalize, Switch::On),
                    dk,
                    heads,
                    max_len,
                    &mut rng,
                ));
            }
            let cfg = BenchConfig {
                variants: specs,
                seq_lengths: seq_lens,
                batch,
                warmup_iters: warmup,
                measured_iters: iters,
                seed,
                output_path: out.clone(),
            };
            let records = run_latency_sweep(&cfg)?;
            match out {
                Some(path) => eprintln!("wrote {} records to {}", records.len(), path.display()),
                None => write_csv(&records, std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Gradcheck { seed, out } => {
            let outcomes: Vec<SuiteOutcome> = pool(cli.threads)?.install(|| {
                Case::all()
                    .into_par_iter()
                    .map(|case| run_case(case, seed))
                    .collect::<lmec_core::Result<_>>()
            })?;
            let mut all = SuiteOutcome::default();
            outcomes.into_iter().for_each(|o| all.extend(o));

            let mut sink: Box<dyn Write> = match &out {
                Some(path) => Box::new(BufWriter::new(
                    File::create(path).with_context(|| format!("creating {}", path.display()))?,
                )),
                None => Box::new(std::io::stdout().lock()),
            };
            writeln!(sink, "{}", GradReport::CSV_HEADER)?;
            for r in &all.reports {
                writeln!(sink, "{}", r.csv_line())?;
            }
            sink.flush()?;

            let failing: Vec<_> = all.reports.iter().filter(|r| !r.passes()).collect();
            for r in &failing {
                eprintln!("FAIL {r}");
            }
            let worst_order = all
                .order_agreement
                .iter()
                .map(|a| a.rel_error)
                .fold(0.0f64, f64::max);
            eprintln!(
                "{} tensors checked, {} above relative error 1e-6; left/right analytic gradients differ by at most {worst_order:.2e}",
                all.reports.len(),
                failing.len()
            );
            Ok(all.passes())
        }
        Command::Equivalence { seed } => {
            let combos: Vec<(ActivationKind, PeKind)> = ActivationKind::ALL
                .into_iter()
                .flat_map(|a| PeKind::ALL.into_iter().map(move |p| (a, p)))
                .collect();
            let results: Vec<(ActivationKind, PeKind, f64)> = pool(cli.threads)?.install(|| {
                combos
                    .into_par_iter()
                    .map(|(a, p)| worst_order_gap(a, p, seed).map(|e| (a, p, e)))
                    .collect::<lmec_core::Result<_>>()
            })?;
            let mut ok = true;
            for (a, p, e) in results {
                let pass = e < EQUIVALENCE_TOLERANCE;
                ok &= pass;
                println!("{} {p}-{a} max rel {e:.3e}", if pass { "ok  " } else { "FAIL" });
            }
            Ok(ok)
        }
    }
}

/// Largest normwise relative gap between the two product orders over the
/// standard lengths and head widths, with and without normalization.
fn worst_order_gap(activation: ActivationKind, pe: PeKind, seed: u64) -> lmec_core::Result<f64> {
    let max_len = *EQUIVALENCE_LENGTHS.iter().max().unwrap();
    let mut worst = 0.0f64;
    for &n in &EQUIVALENCE_LENGTHS {
        for &d_k in &EQUIVALENCE_HEAD_DIMS {
            let mut rng = Rng::new(seed ^ ((n as u64) << 8) ^ ((d_k as u64) << 24));
            let mut q = rng.normal_matrix(n, d_k, 1.0);
            let mut k = rng.normal_matrix(n, d_k, 1.0);
            if activation == ActivationKind::Relu {
                // keeps every normalizer positive
                q = q.map(f64::abs);
                k = k.map(f64::abs);
            }
            let v = rng.normal_matrix(n, d_k, 1.0);
            let pe = pe.instantiate(max_len, d_k, &mut rng);
            for normalize in [false, true] {
                let left = LinearAttentionSpec {
                    activation,
                    pe: pe.clone(),
                    order: OrderPolicy::Left,
                    normalize,
                    d_k,
                    heads: 1,
                };
                let right = LinearAttentionSpec { order: OrderPolicy::Right, ..left.clone() };
                let l = linear_attention(&q, &k, &v, &left)?.values;
                let r = linear_attention(&q, &k, &v, &right)?.values;
                worst = worst.max(r.relative_error(&l)?);
            }
        }
    }
    Ok(worst)
}
