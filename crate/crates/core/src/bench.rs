//! Latency sweeps over sequence length and their CSV form.
//!
//! One timing sample is the wall time of a single pass of multi-head
//! attention over every sequence in the batch. Sequences are processed one
//! after another on the calling thread.

use std::fs::{File, OpenOptions};
use std::hint::black_box;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::{attention_heads, LinearAttentionSpec, OrderPolicy, ProductOrder};
use crate::error::{LmecError, Result};
use crate::kernels::{ActivationKind, PeKind};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<LinearAttentionSpec>,
    pub seq_lengths: Vec<usize>,
    pub batch: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub seed: u64,
    /// Written after the sweep when set; checked for writability before it.
    pub output_path: Option<PathBuf>,
}

pub const DESK_SEQ_LENGTHS: [usize; 5] = [100, 250, 500, 1000, 2000];
pub const DESK_D_K: usize = 64;
pub const DESK_HEADS: usize = 4;
pub const DESK_BATCH: usize = 4;
pub const DESK_WARMUP: usize = 50;
pub const DESK_ITERS: usize = 200;

/// One spec per position-embedding kind, sharing everything else. `max_len`
/// bounds the position-dependent styles; per-column parameters get
/// `heads · d_k` columns.
#[allow(clippy::too_many_arguments)]
pub fn variant_specs(
    kinds: &[PeKind],
    activation: ActivationKind,
    order: OrderPolicy,
    normalize: bool,
    d_k: usize,
    heads: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Vec<LinearAttentionSpec> {
    kinds
        .iter()
        .map(|kind| LinearAttentionSpec {
            activation,
            pe: kind.instantiate(max_len, d_k * heads, rng),
            order,
            normalize,
            d_k,
            heads,
        })
        .collect()
}

impl BenchConfig {
    /// cosFormer against LM-APE in both fixed orders, ELU kernels,
    /// normalized, over the desk-scale lengths.
    pub fn desk(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let max_len = *DESK_SEQ_LENGTHS.iter().max().unwrap();
        let mut variants = Vec::new();
        for order in [OrderPolicy::Left, OrderPolicy::Right] {
            variants.extend(variant_specs(
                &[PeKind::MRpe, PeKind::LmApe],
                ActivationKind::EluPlusOne,
                order,
                true,
                DESK_D_K,
                DESK_HEADS,
                max_len,
                &mut rng,
            ));
        }
        Self {
            variants,
            seq_lengths: DESK_SEQ_LENGTHS.to_vec(),
            batch: DESK_BATCH,
            warmup_iters: DESK_WARMUP,
            measured_iters: DESK_ITERS,
            seed,
            output_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.measured_iters == 0 {
            return Err(LmecError::Config("measured iterations must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(LmecError::Config("batch must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(LmecError::Config("no variants to benchmark".into()));
        }
        if self.seq_lengths.is_empty() {
            return Err(LmecError::Config("no sequence lengths to benchmark".into()));
        }
        if self.seq_lengths.contains(&0) {
            return Err(LmecError::Config("sequence lengths must be positive".into()));
        }
        for spec in &self.variants {
            if spec.heads == 0 || spec.d_k == 0 {
                return Err(LmecError::Config(format!("{} has no heads or zero width", spec.label())));
            }
            for &n in &self.seq_lengths {
                spec.pe.check_len(n)?;
            }
        }
        Ok(())
    }
}

/// One timing observation.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub label: String,
    pub pe: PeKind,
    /// The order actually evaluated, after dynamic dispatch.
    pub order: ProductOrder,
    pub n: usize,
    pub d_k: usize,
    pub heads: usize,
    /// Seconds per pass over the batch.
    pub mean_s: f64,
    pub stddev_s: f64,
    /// Per pass over the batch.
    pub flop_estimate: u64,
    pub median_s: f64,
    pub samples: usize,
}

/// Mean, sample standard deviation and median of a non-empty sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingStats {
    pub mean: f64,
    pub stddev: f64,
    pub median: f64,
    pub samples: usize,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(LmecError::Config("no timing samples".into()));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(Self { mean, stddev, median, samples: n })
    }
}

fn check_writable(path: &Path) -> Result<()> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(drop)
        .map_err(|e| LmecError::io(path, e))
}

/// Inputs for sequence `b` of length `n`, identical for every variant.
fn inputs(seed: u64, n: usize, b: usize, width: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed ^ ((n as u64) << 20) ^ b as u64);
    (
        rng.normal_matrix(n, width, 1.0),
        rng.normal_matrix(n, width, 1.0),
        rng.normal_matrix(n, width, 1.0),
    )
}

pub fn run_latency_sweep(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    if let Some(path) = &cfg.output_path {
        check_writable(path)?;
    }
    let mut records = Vec::with_capacity(cfg.variants.len() * cfg.seq_lengths.len());
    for spec in &cfg.variants {
        for &n in &cfg.seq_lengths {
            records.push(time_variant(cfg, spec, n)?);
        }
    }
    if let Some(path) = &cfg.output_path {
        emit_csv(&records, path)?;
    }
    Ok(records)
}

fn time_variant(cfg: &BenchConfig, spec: &LinearAttentionSpec, n: usize) -> Result<BenchRecord> {
    let batch: Vec<_> = (0..cfg.batch)
        .map(|b| inputs(cfg.seed, n, b, spec.model_dim()))
        .collect();
    let pass = || -> Result<u64> {
        let mut flops = 0;
        for (q, k, v) in &batch {
            let out = attention_heads(black_box(q), black_box(k), black_box(v), spec)?;
            flops += out.flop_estimate;
            black_box(out.values);
        }
        Ok(flops)
    };
    for _ in 0..cfg.warmup_iters {
        pass()?;
    }
    let mut samples = Vec::with_capacity(cfg.measured_iters);
    let mut flop_estimate = 0;
    for _ in 0..cfg.measured_iters {
        let start = Instant::now();
        flop_estimate = pass()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let stats = TimingStats::from_samples(&samples)?;
    Ok(BenchRecord {
        label: spec.label(),
        pe: PeKind::from(&spec.pe),
        order: spec.resolve_order(n),
        n,
        d_k: spec.d_k,
        heads: spec.heads,
        mean_s: stats.mean,
        stddev_s: stats.stddev,
        flop_estimate,
        median_s: stats.median,
        samples: stats.samples,
    })
}

pub const CSV_HEADER: &str =
    "label,pe,order,n,d_k,heads,mean_s,stddev_s,flop_estimate,median_s,samples";

pub fn write_csv<W: Write>(records: &[BenchRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.9},{:.9},{},{:.9},{}",
            r.label, r.pe, r.order, r.n, r.d_k, r.heads, r.mean_s, r.stddev_s, r.flop_estimate, r.median_s, r.samples
        )?;
    }
    w.flush()
}

pub fn emit_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if records.is_empty() {
        return Err(LmecError::Config("no records to write".into()));
    }
    let file = File::create(path).map_err(|e| LmecError::io(path, e))?;
    write_csv(records, BufWriter::new(file)).map_err(|e| LmecError::io(path, e))
}

fn field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| LmecError::Format(format!("line {line}: bad {name} `{raw}`")))
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(LmecError::Format(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(LmecError::Format(format!("line {no}: {} fields, expected 11", f.len())));
            }
            Ok(BenchRecord {
                label: f[0].to_string(),
                pe: f[1].parse()?,
                order: f[2].parse()?,
                n: field(no, "n", f[3])?,
                d_k: field(no, "d_k", f[4])?,
                heads: field(no, "heads", f[5])?,
                mean_s: field(no, "mean_s", f[6])?,
                stddev_s: field(no, "stddev_s", f[7])?,
                flop_estimate: field(no, "flop_estimate", f[8])?,
                median_s: field(no, "median_s", f[9])?,
                samples: field(no, "samples", f[10])?,
            })
        })
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LmecError::io(path, e))?;
    parse_csv(&text)
}
