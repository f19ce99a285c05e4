//! The `scram` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 infeasible
//! validity policy or degenerate normalizer.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{full_attention, full_attention_weights};
use crate::error::ScramError;
use crate::field::{FieldImage, Shape};
use crate::forward::{scram_run, sparse_weights, ScramConfig};
use crate::harness::{
    quality_report, run_scaling_bench, write_bench_csv, write_gnuplot, write_quality_csv, BenchConfig,
    MatchSource, Method, QualityConfig,
};
use crate::io::{export_heatmap, fields_to_raster, read_field, write_field, write_pgm, FormatError};
use crate::mc::{mh_estimate, snis_estimate, MhConfig, ModeSet, SnisConfig};
use crate::patchmatch::{top_kappa, PatchMatchConfig, ValidityPolicy};
use crate::synth::{
    coherent_lowrank_family, gen_blobs, gen_lowrank_qk, random_blobs, uniform_field,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "scram", version, about = "Sparse PatchMatch attention on 2D fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic field
    Gen(GenArgs),
    /// Compute an attention output
    Attend(AttendArgs),
    /// Compute top-kappa neighbour fields and store them as a raster
    Patchmatch(PatchmatchArgs),
    /// Time forward passes and fit runtime scaling exponents
    Bench(BenchArgs),
    /// Compare sparse configurations against exact attention
    Quality(QualityArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GenKind {
    Blobs,
    Lowrank,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Full,
    Scram,
    Snis,
    Mh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Max,
    Mode,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    /// Field size as HxW
    #[arg(long, value_parser = parse_shape, default_value = "32x32")]
    size: Shape,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Number of blobs
    #[arg(long, default_value_t = 3)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Blob width in pixels
    #[arg(long, default_value_t = 2.0)]
    width: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single-channel source raster (SCRF1 or PGM) for the low-rank kind
    #[arg(long)]
    source: Option<PathBuf>,
    /// Output path; the query field for the low-rank kind
    #[arg(short = 'o', long)]
    output: PathBuf,
    /// Key field output for the low-rank kind
    #[arg(long)]
    key_out: Option<PathBuf>,
    /// Value field output for the low-rank kind
    #[arg(long)]
    value_out: Option<PathBuf>,
    /// Also write the first channel as PGM
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SparseArgs {
    #[arg(long, value_enum, default_value = "max")]
    variant: Variant,
    #[arg(long, default_value_t = 3)]
    kappa: usize,
    /// Minimum Chebyshev separation between modes (mode variant)
    #[arg(short = 'L', long = "separation", default_value_t = 2)]
    separation: usize,
    /// Window half-width around each match
    #[arg(long = "b", default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 8)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads, 0 for all cores
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    causal: bool,
}

impl SparseArgs {
    fn config(&self) -> ScramConfig {
        let policy = match self.variant {
            Variant::Max => ValidityPolicy::MaxNonDuplicate,
            Variant::Mode => ValidityPolicy::ModeSeparated {
                separation: self.separation,
            },
        };
        ScramConfig {
            kappa: self.kappa,
            radius: self.radius,
            policy,
            patchmatch: PatchMatchConfig {
                iterations: self.iterations,
                ..PatchMatchConfig::with_seed(self.seed)
            },
            causal: self.causal,
        }
    }
}

#[derive(Debug, Args)]
struct AttendArgs {
    #[arg(long, value_enum, default_value = "scram")]
    method: MethodArg,
    #[command(flatten)]
    sparse: SparseArgs,
    #[arg(short = 'q', long)]
    queries: PathBuf,
    #[arg(short = 'k', long)]
    keys: PathBuf,
    #[arg(short = 'v', long)]
    values: PathBuf,
    #[arg(short = 'o', long)]
    output: PathBuf,
    /// Weight of the mode bumps in the importance distribution
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Bump width for importance sampling and the MH proposal
    #[arg(long, default_value_t = 2.0)]
    phi: f64,
    /// Importance samples per query (default: kappa * (2b+1)^2)
    #[arg(long)]
    samples: Option<usize>,
    /// Chains per query (default: one per mode)
    #[arg(long)]
    chains: Option<usize>,
    /// Steps per chain (default: (2b+1)^2)
    #[arg(long)]
    steps: Option<usize>,
    /// Write one query's attention map as PGM
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    heatmap_query: usize,
}

#[derive(Debug, Args)]
struct PatchmatchArgs {
    #[command(flatten)]
    sparse: SparseArgs,
    #[arg(short = 'q', long)]
    queries: PathBuf,
    #[arg(short = 'k', long)]
    keys: PathBuf,
    /// Output raster of depth 2*kappa holding (y, x) per rank, -1 when unmatched
    #[arg(short = 'o', long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "full,scram")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse_shape, default_value = "32x32,64x64,128x128")]
    sizes: Vec<Shape>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    kappa: usize,
    #[arg(long = "b", default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Per-repetition limit in seconds
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// CSV output (default: standard output)
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QualityArgs {
    #[arg(short = 'q', long)]
    queries: PathBuf,
    #[arg(short = 'k', long)]
    keys: PathBuf,
    #[arg(short = 'v', long)]
    values: PathBuf,
    /// Configurations as variant:kappa:b[:L], comma separated
    #[arg(long, value_delimiter = ',', default_value = "max:3:1,mode:3:1:2")]
    configs: Vec<String>,
    /// Use exact matches instead of PatchMatch
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 8)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.parse().map_err(|e| format!("bad height in {s:?}: {e}"))?;
    let w: usize = w.parse().map_err(|e| format!("bad width in {s:?}: {e}"))?;
    if h == 0 || w == 0 {
        return Err(format!("dimensions must be >= 1 in {s:?}"));
    }
    Ok(Shape::new(h, w))
}

enum Failure {
    Usage(String),
    Data(String),
    Infeasible(String),
}

impl From<ScramError> for Failure {
    fn from(e: ScramError) -> Self {
        match e {
            ScramError::InvalidConfig(_) | ScramError::KappaTooLarge { .. } => Failure::Usage(e.to_string()),
            ScramError::InfeasibleSeparation { .. }
            | ScramError::InfeasiblePolicy { .. }
            | ScramError::DegenerateRow
            | ScramError::DegenerateNormalizer { .. } => Failure::Infeasible(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Shape(inner) => inner.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Attend(a) => {
            let threads = a.sparse.threads;
            crate::with_threads(threads, || attend(a))
        }
        Command::Patchmatch(a) => {
            let threads = a.sparse.threads;
            crate::with_threads(threads, || patchmatch(a))
        }
        Command::Bench(a) => bench(a),
        Command::Quality(a) => {
            let threads = a.threads;
            crate::with_threads(threads, || quality(a))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
        Err(Failure::Infeasible(m)) => {
            eprintln!("error: {m}");
            EXIT_INFEASIBLE
        }
    }
}

fn read(path: &Path) -> Result<FieldImage, Failure> {
    read_field(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn gen(a: GenArgs) -> CliResult {
    match a.kind {
        GenKind::Uniform => {
            let f = uniform_field(a.size.height, a.size.width, a.depth, a.seed);
            write_field(&f, &a.output)?;
            if let Some(p) = &a.pgm {
                write_pgm(&f, p)?;
            }
        }
        GenKind::Blobs => {
            let margin = (a.width.ceil() as usize).min(a.size.height.min(a.size.width) / 4);
            let sep = (2.0 * a.width).ceil() as usize;
            let blobs = random_blobs(a.size, a.count, a.amplitude, a.width, sep, margin, a.seed)?;
            let f = gen_blobs(a.size, a.depth, &blobs)?;
            write_field(&f, &a.output)?;
            if let Some(p) = &a.pgm {
                write_pgm(&f, p)?;
            }
            for b in &blobs {
                eprintln!("blob at ({}, {}) amplitude {:.3}", b.center.y, b.center.x, b.amplitude);
            }
        }
        GenKind::Lowrank => {
            let key_out = a
                .key_out
                .as_ref()
                .ok_or_else(|| Failure::Usage("--key-out is required for --kind lowrank".into()))?;
            let (q, k, v) = match &a.source {
                Some(src) => {
                    let source = read(src)?;
                    let n = a.size.len();
                    if source.height() != n || source.width() != n {
                        return Err(Failure::Data(format!(
                            "source must be {n}x{n} for size {}x{}, got {}x{}",
                            a.size.height,
                            a.size.width,
                            source.height(),
                            source.width()
                        )));
                    }
                    let lr = gen_lowrank_qk(&source, a.depth, a.size, a.size)?;
                    if lr.rank_deficient {
                        eprintln!("warning: source has effective rank {} < {}", lr.effective_rank, a.depth);
                    }
                    let v = uniform_field(a.size.height, a.size.width, a.depth, a.seed);
                    (lr.queries, lr.keys, v)
                }
                None => coherent_lowrank_family(a.size, a.depth, a.depth, a.seed)?,
            };
            write_field(&q, &a.output)?;
            write_field(&k, key_out)?;
            if let Some(p) = &a.value_out {
                write_field(&v, p)?;
            }
        }
    }
    Ok(())
}

fn attend(a: AttendArgs) -> CliResult {
    let q = read(&a.queries)?;
    let k = read(&a.keys)?;
    let v = read(&a.values)?;
    let cfg = a.sparse.config();
    cfg.policy.validate()?;
    cfg.patchmatch.validate()?;
    if a.sparse.causal && matches!(a.method, MethodArg::Snis | MethodArg::Mh) {
        return Err(Failure::Usage("--causal is supported for the full and scram methods only".into()));
    }
    let mut heat: Option<Vec<f64>> = None;
    let wants_heat = a.heatmap.is_some();
    if wants_heat && a.heatmap_query >= q.len() {
        return Err(Failure::Usage(format!(
            "--heatmap-query {} out of range for {} queries",
            a.heatmap_query,
            q.len()
        )));
    }
    let output = match a.method {
        MethodArg::Full => {
            if wants_heat {
                let w = full_attention_weights(&q, &k, cfg.causal)?;
                heat = Some(w.row(a.heatmap_query).to_vec());
            }
            full_attention(&q, &k, &v, cfg.causal)?
        }
        MethodArg::Scram => {
            let run = scram_run(&q, &k, &v, &cfg)?;
            if wants_heat {
                let mut row = vec![0.0; k.len()];
                for (j, p) in sparse_weights(&q, &k, &run.sets, a.heatmap_query, cfg.causal).unwrap_or_default() {
                    row[j] = p;
                }
                heat = Some(row);
            }
            run.output
        }
        MethodArg::Snis | MethodArg::Mh => {
            if wants_heat {
                return Err(Failure::Usage("--heatmap needs the full or scram method".into()));
            }
            let fields = top_kappa(&q, &k, cfg.kappa, cfg.policy, &cfg.patchmatch, false)?;
            let modes = ModeSet::from_fields(&fields);
            if a.method == MethodArg::Snis {
                let mut snis = SnisConfig {
                    alpha: a.alpha,
                    phi: a.phi,
                    seed: a.sparse.seed,
                    ..SnisConfig::budget(cfg.kappa, cfg.radius)
                };
                if let Some(s) = a.samples {
                    snis.samples = s;
                }
                let (out, diag) = snis_estimate(&q, &k, &v, &modes, &snis)?;
                let mean_ess = diag.ess.iter().sum::<f64>() / diag.ess.len() as f64;
                eprintln!("snis: {} samples per query, mean ESS {mean_ess:.3}", snis.samples);
                out
            } else {
                let mh = MhConfig {
                    chains: a.chains,
                    steps: a.steps.unwrap_or((2 * cfg.radius + 1).pow(2)),
                    phi: a.phi,
                    seed: a.sparse.seed,
                };
                let (out, diag) = mh_estimate(&q, &k, &v, &modes, &mh)?;
                eprintln!("mh: mean acceptance rate {:.4}", diag.mean_acceptance());
                out
            }
        }
    };
    let degenerate = output.degenerate.iter().filter(|&&d| d).count();
    if degenerate > 0 {
        eprintln!("{degenerate} fully masked queries produced zero outputs");
    }
    write_field(&output.values, &a.output)?;
    if let (Some(path), Some(row)) = (&a.heatmap, heat) {
        export_heatmap(&row, k.shape(), path)?;
    }
    Ok(())
}

fn patchmatch(a: PatchmatchArgs) -> CliResult {
    let q = read(&a.queries)?;
    let k = read(&a.keys)?;
    let cfg = a.sparse.config();
    let fields = top_kappa(&q, &k, cfg.kappa, cfg.policy, &cfg.patchmatch, cfg.causal)?;
    for (r, f) in fields.iter().enumerate() {
        eprintln!("rank {r}: objective {:.6}", f.objective(&q, &k));
    }
    write_field(&fields_to_raster(&fields)?, &a.output)?;
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    let methods = a
        .methods
        .iter()
        .map(|m| Method::parse(m).ok_or_else(|| Failure::Usage(format!("unknown method {m:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if !(a.timeout.is_finite() && a.timeout > 0.0) {
        return Err(Failure::Usage("--timeout must be positive".into()));
    }
    let config = BenchConfig {
        scram: ScramConfig {
            kappa: a.kappa,
            radius: a.radius,
            patchmatch: PatchMatchConfig::with_seed(a.seed),
            ..ScramConfig::default()
        },
        depth: a.depth,
        reps: a.reps,
        threads: a.threads,
        seed: a.seed,
        timeout: Duration::from_secs_f64(a.timeout),
    };
    let report = run_scaling_bench(&methods, &a.sizes, &config)?;
    match &a.output {
        Some(path) => {
            let mut buf = Vec::new();
            write_bench_csv(&report.records, &mut buf)?;
            crate::io::write_atomic(path, &buf)?;
        }
        None => write_bench_csv(&report.records, std::io::stdout().lock())?,
    }
    if let Some(path) = &a.gnuplot {
        let mut buf = Vec::new();
        write_gnuplot(&report.records, &mut buf)?;
        crate::io::write_atomic(path, &buf)?;
    }
    for r in report.records.iter().filter(|r| r.timed_out) {
        eprintln!("{} timed out at n = {}", r.method, r.n);
    }
    for (m, slope) in &report.slopes {
        match slope {
            Some(s) => eprintln!("{} log-log slope {s:.3}", m.name()),
            None => eprintln!("{} log-log slope unavailable", m.name()),
        }
    }
    Ok(())
}

fn parse_quality_config(s: &str, iterations: usize, seed: u64, exact: bool) -> Result<QualityConfig, Failure> {
    let bad = || Failure::Usage(format!("bad configuration {s:?}, expected variant:kappa:b[:L]"));
    let parts: Vec<&str> = s.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let kappa: usize = parts[1].parse().map_err(|_| bad())?;
    let radius: usize = parts[2].parse().map_err(|_| bad())?;
    let policy = match (parts[0], parts.get(3)) {
        ("max", None) => ValidityPolicy::MaxNonDuplicate,
        ("mode", l) => ValidityPolicy::ModeSeparated {
            separation: l.map_or(Ok(2), |l| l.parse()).map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    Ok(QualityConfig {
        name: s.to_string(),
        scram: ScramConfig {
            kappa,
            radius,
            policy,
            patchmatch: PatchMatchConfig {
                iterations,
                ..PatchMatchConfig::with_seed(seed)
            },
            causal: false,
        },
        source: if exact { MatchSource::Exact } else { MatchSource::PatchMatch },
    })
}

fn quality(a: QualityArgs) -> CliResult {
    let configs = a
        .configs
        .iter()
        .map(|s| parse_quality_config(s, a.iterations, a.seed, a.exact))
        .collect::<Result<Vec<_>, _>>()?;
    let q = read(&a.queries)?;
    let k = read(&a.keys)?;
    let v = read(&a.values)?;
    let rows = quality_report(&q, &k, &v, &configs)?;
    for r in &rows {
        eprintln!(
            "{}: median L2 {:.3e}, max Linf {:.3e}, median coverage {:.3}, argmax hits {:.3}, gate {}",
            r.name,
            r.median_l2(),
            r.max_linf(),
            r.median_coverage(),
            r.argmax_hit_rate(),
            if r.passes_coverage_gate() { "pass" } else { "fail" }
        );
    }
    match &a.output {
        Some(path) => {
            let mut buf = Vec::new();
            write_quality_csv(&rows, &mut buf)?;
            crate::io::write_atomic(path, &buf)?;
        }
        None => {
            write_quality_csv(&rows, std::io::stdout().lock())?;
        }
    }
    Ok(())
}
