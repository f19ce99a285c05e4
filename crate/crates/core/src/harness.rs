//! Runtime scaling benchmarks and approximation-quality reports.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::{full_attention, full_attention_weights, top_k_exact, top_k_mode_exact, AttentionOutput};
use crate::error::{Result, ScramError};
use crate::field::{FieldImage, Shape};
use crate::forward::{expand_neighbourhood, sparse_attention_output, ScramConfig, SparseIndexSets};
use crate::mc::{mh_estimate, snis_estimate, MhConfig, ModeSet, SnisConfig};
use crate::patchmatch::{top_kappa, NeighbourField, ValidityPolicy};
use crate::synth::uniform_field;
use crate::with_threads;

/// Largest query or key count the dense oracle is run on.
pub const ORACLE_LIMIT: usize = 1 << 14;

/// Median attention mass captured by the sparse support that a quality run
/// must reach.
pub const COVERAGE_GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Full,
    Scram,
    Snis,
    Mh,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Scram => "scram",
            Self::Snis => "snis",
            Self::Mh => "mh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "scram" => Some(Self::Scram),
            "snis" => Some(Self::Snis),
            "mh" => Some(Self::Mh),
            _ => None,
        }
    }
}

pub fn variant_name(policy: ValidityPolicy) -> String {
    match policy {
        ValidityPolicy::MaxNonDuplicate => "max".into(),
        ValidityPolicy::ModeSeparated { separation } => format!("mode{separation}"),
    }
}

/// Runs one forward pass of `method`. Monte Carlo methods take their modes
/// from a top-kappa search with `config`.
pub fn run_method(
    method: Method,
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    config: &ScramConfig,
) -> Result<AttentionOutput> {
    match method {
        Method::Full => full_attention(q, k, v, config.causal),
        Method::Scram => crate::forward::scram_forward(q, k, v, config),
        Method::Snis | Method::Mh => {
            let fields = top_kappa(q, k, config.kappa, config.policy, &config.patchmatch, false)?;
            let modes = ModeSet::from_fields(&fields);
            if method == Method::Snis {
                let snis = SnisConfig {
                    seed: config.patchmatch.seed,
                    ..SnisConfig::budget(config.kappa, config.radius)
                };
                snis_estimate(q, k, v, &modes, &snis).map(|r| r.0)
            } else {
                let mh = MhConfig {
                    steps: (2 * config.radius + 1).pow(2),
                    seed: config.patchmatch.seed,
                    ..MhConfig::default()
                };
                mh_estimate(q, k, v, &modes, &mh).map(|r| r.0)
            }
        }
    }
}

/// One timing row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub method: String,
    pub n: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub d_k: usize,
    pub kappa: usize,
    pub b: usize,
    pub variant: String,
    pub seconds_mean: f64,
    pub seconds_std: f64,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
    #[serde(skip)]
    pub timed_out: bool,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scram: ScramConfig,
    pub depth: usize,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
    /// Per-run ceiling; a method exceeding it is excluded from the fit.
    pub timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scram: ScramConfig {
                kappa: 2,
                radius: 1,
                ..ScramConfig::default()
            },
            depth: 3,
            reps: 5,
            threads: 1,
            seed: 0,
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Fitted log-log slope per method; `None` with fewer than two usable sizes.
    pub slopes: Vec<(Method, Option<f64>)>,
}

impl BenchReport {
    pub fn slope(&self, method: Method) -> Option<f64> {
        self.slopes.iter().find(|(m, _)| *m == method).and_then(|(_, s)| *s)
    }
}

/// Least-squares slope of `ln(seconds)` against `ln(n)`.
pub fn fit_loglog_slope(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn time_method(
    method: Method,
    shape: Shape,
    config: &BenchConfig,
) -> Result<BenchRecord> {
    // Data generation stays outside the timed region.
    let q = uniform_field(shape.height, shape.width, config.depth, config.seed);
    let k = uniform_field(shape.height, shape.width, config.depth, config.seed + 1);
    let v = uniform_field(shape.height, shape.width, config.depth, config.seed + 2);
    let mut samples = Vec::with_capacity(config.reps);
    let mut timed_out = false;
    with_threads(config.threads, || -> Result<()> {
        let warm = Instant::now();
        run_method(method, &q, &k, &v, &config.scram)?;
        if warm.elapsed() > config.timeout {
            timed_out = true;
            return Ok(());
        }
        for _ in 0..config.reps {
            let t = Instant::now();
            let out = run_method(method, &q, &k, &v, &config.scram)?;
            let dt = t.elapsed();
            std::hint::black_box(out);
            samples.push(dt.as_secs_f64());
            if dt > config.timeout {
                timed_out = true;
                break;
            }
        }
        Ok(())
    })?;
    let reps = samples.len().max(1);
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / reps as f64;
    Ok(BenchRecord {
        method: method.name().into(),
        n: shape.len(),
        height: shape.height,
        width: shape.width,
        d_k: config.depth,
        kappa: config.scram.kappa,
        b: config.scram.radius,
        variant: variant_name(config.scram.policy),
        seconds_mean: if samples.is_empty() { config.timeout.as_secs_f64() } else { mean },
        seconds_std: var.sqrt(),
        reps,
        threads: config.threads,
        seed: config.seed,
        timed_out,
    })
}

/// Times each method on each size (one warm-up, then the mean of `reps`
/// runs) and fits log-log slopes. A method that times out on a size is not
/// run on larger sizes.
pub fn run_scaling_bench(methods: &[Method], sizes: &[Shape], config: &BenchConfig) -> Result<BenchReport> {
    if config.reps < 3 {
        return Err(ScramError::InvalidConfig("benchmarks need at least 3 repetitions".into()));
    }
    if sizes.windows(2).any(|w| w[0].len() >= w[1].len()) {
        return Err(ScramError::InvalidConfig("sizes must be strictly ascending".into()));
    }
    let mut records = Vec::new();
    let mut slopes = Vec::new();
    for &method in methods {
        let mut points = Vec::new();
        for &shape in sizes {
            let rec = time_method(method, shape, config)?;
            let stop = rec.timed_out;
            if !stop {
                points.push((rec.n, rec.seconds_mean));
            }
            records.push(rec);
            if stop {
                break;
            }
        }
        slopes.push((method, fit_loglog_slope(&points)));
    }
    Ok(BenchReport { records, slopes })
}

pub fn write_bench_csv<W: Write>(records: &[BenchRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()
}

/// Whitespace-separated `n seconds_mean seconds_std` blocks, one per method,
/// separated by two blank lines for gnuplot's `index`.
pub fn write_gnuplot<W: Write>(records: &[BenchRecord], mut out: W) -> std::io::Result<()> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for (b, m) in methods.iter().enumerate() {
        if b > 0 {
            writeln!(out, "\n")?;
        }
        writeln!(out, "# {m}")?;
        for r in records.iter().filter(|r| r.method == *m && !r.timed_out) {
            writeln!(out, "{} {:.9} {:.9}", r.n, r.seconds_mean, r.seconds_std)?;
        }
    }
    Ok(())
}

/// Where a quality run takes its matches from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchSource {
    PatchMatch,
    /// Exact top-kappa (or exact greedy mode selection) instead of PatchMatch.
    Exact,
}

#[derive(Debug, Clone)]
pub struct QualityConfig {
    pub name: String,
    pub scram: ScramConfig,
    pub source: MatchSource,
}

/// Error summary of one configuration against exact attention.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub name: String,
    pub variant: String,
    pub kappa: usize,
    pub b: usize,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
    pub coverage: Vec<f64>,
    pub argmax_hits: Vec<bool>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

impl QualityRow {
    pub fn median_l2(&self) -> f64 {
        median(&self.l2)
    }

    pub fn max_linf(&self) -> f64 {
        self.linf.iter().copied().fold(0.0, f64::max)
    }

    pub fn median_coverage(&self) -> f64 {
        median(&self.coverage)
    }

    pub fn argmax_hit_rate(&self) -> f64 {
        self.argmax_hits.iter().filter(|&&h| h).count() as f64 / self.argmax_hits.len().max(1) as f64
    }

    pub fn passes_coverage_gate(&self) -> bool {
        self.median_coverage() >= COVERAGE_GATE
    }
}

fn exact_fields(q: &FieldImage, k: &FieldImage, config: &ScramConfig) -> Result<Vec<NeighbourField>> {
    let ranked = match config.policy {
        ValidityPolicy::MaxNonDuplicate => top_k_exact(q, k, config.kappa)?,
        ValidityPolicy::ModeSeparated { separation } => top_k_mode_exact(q, k, config.kappa, separation)?,
    };
    (0..config.kappa)
        .map(|r| NeighbourField::new(q.shape(), k.shape(), ranked.iter().map(|row| Some(row[r])).collect()))
        .collect()
}

/// Compares each configuration's sparse output with exact attention:
/// per-query L2 and L-infinity error, attention mass covered by the sparse
/// support, and whether the support holds a best-scoring key.
pub fn quality_report(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    configs: &[QualityConfig],
) -> Result<Vec<QualityRow>> {
    for n in [q.len(), k.len()] {
        if n > ORACLE_LIMIT {
            return Err(ScramError::OracleTooLarge { n, limit: ORACLE_LIMIT });
        }
    }
    let exact = full_attention(q, k, v, false)?;
    let weights = full_attention_weights(q, k, false)?;
    let best: Vec<f64> = (0..q.len())
        .map(|i| weights.row(i).iter().copied().fold(0.0, f64::max))
        .collect();
    configs
        .iter()
        .map(|c| {
            let fields = match c.source {
                MatchSource::PatchMatch => {
                    top_kappa(q, k, c.scram.kappa, c.scram.policy, &c.scram.patchmatch, false)?
                }
                MatchSource::Exact => exact_fields(q, k, &c.scram)?,
            };
            let sets: SparseIndexSets = expand_neighbourhood(&fields, c.scram.radius, false)?;
            let approx = sparse_attention_output(q, k, v, &sets, false)?;
            let mut row = QualityRow {
                name: c.name.clone(),
                variant: variant_name(c.scram.policy),
                kappa: c.scram.kappa,
                b: c.scram.radius,
                l2: Vec::with_capacity(q.len()),
                linf: Vec::with_capacity(q.len()),
                coverage: Vec::with_capacity(q.len()),
                argmax_hits: Vec::with_capacity(q.len()),
            };
            for i in 0..q.len() {
                let (mut l2, mut linf) = (0.0f64, 0.0f64);
                for (a, b) in approx.values.vector(i).iter().zip(exact.values.vector(i)) {
                    let d = f64::from(*a) - f64::from(*b);
                    l2 += d * d;
                    linf = linf.max(d.abs());
                }
                let p = weights.row(i);
                row.l2.push(l2.sqrt());
                row.linf.push(linf);
                row.coverage.push(sets.row(i).iter().map(|&j| p[j]).sum());
                row.argmax_hits.push(sets.row(i).iter().any(|&j| p[j] >= best[i]));
            }
            Ok(row)
        })
        .collect()
}

#[derive(Serialize)]
struct QualityCsvRow<'a> {
    name: &'a str,
    variant: &'a str,
    kappa: usize,
    b: usize,
    median_l2: f64,
    max_linf: f64,
    median_coverage: f64,
    argmax_hit_rate: f64,
    coverage_gate: f64,
    gate_passed: bool,
}

pub fn write_quality_csv<W: Write>(rows: &[QualityRow], out: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(QualityCsvRow {
            name: &r.name,
            variant: &r.variant,
            kappa: r.kappa,
            b: r.b,
            median_l2: r.median_l2(),
            max_linf: r.max_linf(),
            median_coverage: r.median_coverage(),
            argmax_hit_rate: r.argmax_hit_rate(),
            coverage_gate: COVERAGE_GATE,
            gate_passed: r.passes_coverage_gate(),
        })?;
    }
    w.flush()
}
