//! Monte Carlo refinements of sparse attention.
//!
//! Both estimators target `p_i(j) ∝ exp(a_ij)` without computing its
//! normalizer. Self-normalized importance sampling draws keys from a mixture
//! of discrete RBF bumps around PatchMatch modes plus a uniform floor;
//! Metropolis-Hastings runs random-walk chains started at those modes.
//! All ratios of the target are formed in log-space.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{assemble_rows, check_qkv, inv_sqrt_depth, scaled_dot, AttentionOutput};
use crate::error::{Result, ScramError};
use crate::field::{FieldImage, PixelIndex, Shape};
use crate::patchmatch::NeighbourField;
use crate::rng::{domain, stream, StreamRng};

/// `exp(a_ij)`, the target before normalization.
pub fn unnormalized_target(q: &[f32], k: &[f32]) -> Result<f64> {
    crate::attention::compatibility(q, k).map(f64::exp)
}

/// Per-query mode centres.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSet {
    rows: Vec<Vec<PixelIndex>>,
}

impl ModeSet {
    pub fn new(rows: Vec<Vec<PixelIndex>>) -> Self {
        Self { rows }
    }

    /// Collects the matches of each query across top-kappa fields.
    pub fn from_fields(fields: &[NeighbourField]) -> Self {
        let n = fields.first().map_or(0, |f| f.shape().len());
        Self {
            rows: (0..n)
                .map(|i| fields.iter().filter_map(|f| f.get(i)).collect())
                .collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[PixelIndex] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One-dimensional Gaussian weights `exp(-(t - c)^2 / 2 phi^2)` over `0..len`,
/// normalized to sum to one.
fn axis_pmf(len: usize, center: usize, phi: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * phi * phi);
    let mut w: Vec<f64> = (0..len)
        .map(|t| {
            let d = t as f64 - center as f64;
            (-d * d * inv).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

fn sample_pmf(pmf: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative value.
    pmf.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Discrete isotropic RBF on the grid, normalized over all pixels. The kernel
/// is separable, so it is stored as a row and a column pmf.
#[derive(Debug, Clone)]
struct GridBump {
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl GridBump {
    fn new(shape: Shape, center: PixelIndex, phi: f64) -> Self {
        Self {
            rows: axis_pmf(shape.height, center.y, phi),
            cols: axis_pmf(shape.width, center.x, phi),
        }
    }

    #[inline]
    fn pmf(&self, p: PixelIndex) -> f64 {
        self.rows[p.y] * self.cols[p.x]
    }

    fn sample(&self, rng: &mut StreamRng) -> PixelIndex {
        let y = sample_pmf(&self.rows, rng);
        let x = sample_pmf(&self.cols, rng);
        PixelIndex::new(y, x)
    }
}

fn check_mixture(modes: &[PixelIndex], alpha: f64, phi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ScramError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(ScramError::InvalidConfig(format!("phi {phi} must be positive")));
    }
    if alpha > 0.0 && modes.is_empty() {
        return Err(ScramError::InvalidConfig("mixture weight alpha > 0 needs at least one mode".into()));
    }
    Ok(())
}

/// Mode-anchored mixture `r(j) = alpha/m * sum_m g(j; theta_m, phi) + (1 - alpha)/n`.
#[derive(Debug, Clone)]
struct Mixture {
    shape: Shape,
    alpha: f64,
    bumps: Vec<GridBump>,
}

impl Mixture {
    fn new(shape: Shape, modes: &[PixelIndex], alpha: f64, phi: f64) -> Result<Self> {
        check_mixture(modes, alpha, phi)?;
        if modes.iter().any(|m| !shape.contains(*m)) {
            return Err(ScramError::InvalidShape("mode outside key field".into()));
        }
        let bumps = if alpha > 0.0 {
            modes.iter().map(|&m| GridBump::new(shape, m, phi)).collect()
        } else {
            Vec::new()
        };
        Ok(Self { shape, alpha, bumps })
    }

    fn pmf(&self, p: PixelIndex) -> f64 {
        let uniform = (1.0 - self.alpha) / self.shape.len() as f64;
        if self.bumps.is_empty() {
            return uniform;
        }
        let local: f64 = self.bumps.iter().map(|b| b.pmf(p)).sum();
        self.alpha / self.bumps.len() as f64 * local + uniform
    }

    fn sample(&self, rng: &mut StreamRng) -> PixelIndex {
        if !self.bumps.is_empty() && rng.gen::<f64>() < self.alpha {
            let m = rng.gen_range(0..self.bumps.len());
            self.bumps[m].sample(rng)
        } else {
            self.shape.pixel(rng.gen_range(0..self.shape.len()))
        }
    }
}

/// Probability of key `j` under the importance mixture built from `modes`.
pub fn importance_pmf(
    j: PixelIndex,
    modes: &[PixelIndex],
    alpha: f64,
    phi: f64,
    shape: Shape,
) -> Result<f64> {
    Ok(Mixture::new(shape, modes, alpha, phi)?.pmf(j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnisConfig {
    pub samples: usize,
    pub alpha: f64,
    pub phi: f64,
    pub seed: u64,
}

impl Default for SnisConfig {
    fn default() -> Self {
        Self::budget(3, 1)
    }
}

impl SnisConfig {
    /// Same per-query key budget as a sparse run with `kappa` matches and
    /// window half-width `radius`.
    pub fn budget(kappa: usize, radius: usize) -> Self {
        Self {
            samples: kappa * (2 * radius + 1).pow(2),
            alpha: 0.9,
            phi: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnisDiagnostics {
    /// `(sum w)^2 / sum w^2` per query.
    pub ess: Vec<f64>,
    /// Delta-method variance per query and value channel, row-major.
    pub variance: Vec<f64>,
    /// `ln(sum w)` per query.
    pub log_weight_sum: Vec<f64>,
}

impl SnisDiagnostics {
    pub fn variance_row(&self, i: usize, channels: usize) -> &[f64] {
        &self.variance[i * channels..(i + 1) * channels]
    }
}

struct SnisRow {
    estimate: Vec<f64>,
    variance: Vec<f64>,
    ess: f64,
    log_weight_sum: f64,
}

fn snis_row(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    i: usize,
    modes: &[PixelIndex],
    config: &SnisConfig,
) -> Result<SnisRow> {
    let mixture = Mixture::new(k.shape(), modes, config.alpha, config.phi)?;
    let scale = inv_sqrt_depth(q.depth());
    let qi = q.vector(i);
    let mut rng = stream(config.seed, &[domain::SNIS, i as u64]);
    let mut draws = Vec::with_capacity(config.samples);
    let mut log_w = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let p = mixture.sample(&mut rng);
        let j = p.linear(k.width());
        log_w.push(scaled_dot(qi, k.vector(j), scale) - mixture.pmf(p).ln());
        draws.push(j);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    if sum.is_nan() || sum <= 0.0 {
        return Err(ScramError::DegenerateNormalizer { query: i });
    }
    let ess = (sum * sum / sum_sq).clamp(1.0, config.samples as f64);

    // Accumulate relative to the first draw so constant values are reproduced
    // exactly and carry exactly zero variance.
    let d = v.depth();
    let reference: Vec<f64> = v.vector(draws[0]).iter().map(|&x| f64::from(x)).collect();
    let mut estimate = reference.clone();
    for (&j, &wt) in draws.iter().zip(&w) {
        let nw = wt / sum;
        for c in 0..d {
            estimate[c] += nw * (f64::from(v.vector(j)[c]) - reference[c]);
        }
    }
    let mut variance = vec![0.0; d];
    for (&j, &wt) in draws.iter().zip(&w) {
        let nw = wt / sum;
        for c in 0..d {
            let r = f64::from(v.vector(j)[c]) - estimate[c];
            variance[c] += nw * nw * r * r;
        }
    }
    Ok(SnisRow {
        estimate,
        variance,
        ess,
        log_weight_sum: sum.ln() + max,
    })
}

/// Self-normalized importance sampling estimate of every output, with ESS
/// and per-channel variance diagnostics.
pub fn snis_estimate(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    modes: &ModeSet,
    config: &SnisConfig,
) -> Result<(AttentionOutput, SnisDiagnostics)> {
    check_qkv(q, k, v, false)?;
    if config.samples == 0 {
        return Err(ScramError::InvalidConfig("sample count must be >= 1".into()));
    }
    if modes.len() != q.len() {
        return Err(ScramError::DimensionMismatch {
            expected: q.len(),
            found: modes.len(),
        });
    }
    let rows: Vec<SnisRow> = (0..q.len())
        .into_par_iter()
        .map(|i| snis_row(q, k, v, i, modes.row(i), config))
        .collect::<Result<_>>()?;
    let d = v.depth();
    let mut data = Vec::with_capacity(q.len() * d);
    let mut diag = SnisDiagnostics {
        ess: Vec::with_capacity(q.len()),
        variance: Vec::with_capacity(q.len() * d),
        log_weight_sum: Vec::with_capacity(q.len()),
    };
    for r in rows {
        data.extend(r.estimate.iter().map(|&x| x as f32));
        diag.variance.extend(r.variance);
        diag.ess.push(r.ess);
        diag.log_weight_sum.push(r.log_weight_sum);
    }
    let output = AttentionOutput {
        values: FieldImage::new(q.height(), q.width(), d, data)?,
        degenerate: vec![false; q.len()],
    };
    Ok((output, diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhConfig {
    /// Chains per query; `None` runs one chain per mode.
    pub chains: Option<usize>,
    pub steps: usize,
    pub phi: f64,
    pub seed: u64,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self {
            chains: None,
            steps: 9,
            phi: 2.0,
            seed: 0,
        }
    }
}

/// Symmetric random-walk proposal: an offset drawn from a truncated discrete
/// Gaussian (zero offset excluded). Offsets leading outside the grid leave the
/// chain in place, which keeps `q(j -> j') = q(j' -> j)` exactly.
#[derive(Debug, Clone)]
pub struct RbfProposal {
    offsets: Vec<(isize, isize)>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl RbfProposal {
    pub fn new(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(ScramError::InvalidConfig(format!("phi {phi} must be positive")));
        }
        let reach = (3.0 * phi).ceil().max(1.0) as isize;
        let inv = 1.0 / (2.0 * phi * phi);
        let mut offsets = Vec::new();
        let mut probs = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if (dy, dx) == (0, 0) {
                    continue;
                }
                offsets.push((dy, dx));
                probs.push((-((dy * dy + dx * dx) as f64) * inv).exp());
            }
        }
        let z: f64 = probs.iter().sum();
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(probs.len());
        for p in &mut probs {
            *p /= z;
            acc += *p;
            cumulative.push(acc);
        }
        Ok(Self {
            offsets,
            probs,
            cumulative,
        })
    }

    fn apply(shape: Shape, from: usize, (dy, dx): (isize, isize)) -> Option<usize> {
        let p = shape.pixel(from);
        let y = p.y.checked_add_signed(dy)?;
        let x = p.x.checked_add_signed(dx)?;
        (y < shape.height && x < shape.width).then(|| y * shape.width + x)
    }

    fn propose(&self, shape: Shape, from: usize, rng: &mut StreamRng) -> Option<usize> {
        let u: f64 = rng.gen();
        let t = self.cumulative.partition_point(|&c| c <= u).min(self.offsets.len() - 1);
        Self::apply(shape, from, self.offsets[t])
    }

    /// Dense `n x n` proposal matrix; out-of-grid mass sits on the diagonal.
    pub fn matrix(&self, shape: Shape) -> Vec<f64> {
        let n = shape.len();
        let mut m = vec![0.0; n * n];
        for from in 0..n {
            for (&o, &p) in self.offsets.iter().zip(&self.probs) {
                let to = Self::apply(shape, from, o).unwrap_or(from);
                m[from * n + to] += p;
            }
        }
        m
    }
}

/// Metropolis-Hastings transition matrix for query `i` (row = from state).
pub fn mh_transition_matrix(q: &FieldImage, k: &FieldImage, i: usize, phi: f64) -> Result<Vec<f64>> {
    crate::attention::check_qk(q, k, false)?;
    let proposal = RbfProposal::new(phi)?;
    let shape = k.shape();
    let n = shape.len();
    let scale = inv_sqrt_depth(q.depth());
    let a: Vec<f64> = (0..n).map(|j| scaled_dot(q.vector(i), k.vector(j), scale)).collect();
    let mut m = vec![0.0; n * n];
    for from in 0..n {
        let mut stay = 1.0;
        for (&o, &p) in proposal.offsets.iter().zip(&proposal.probs) {
            if let Some(to) = RbfProposal::apply(shape, from, o) {
                let acc = (a[to] - a[from]).min(0.0).exp();
                m[from * n + to] += p * acc;
                stay -= p * acc;
            }
        }
        m[from * n + from] += stay;
    }
    Ok(m)
}

/// States visited by each chain of query `i`, initial state first, and the
/// per-chain acceptance rate. The rate counts accepted moves among proposals
/// that landed on the grid; off-grid proposals hold the chain in place without
/// a target comparison. A chain with no on-grid proposal reports 1.
pub fn mh_chains(
    q: &FieldImage,
    k: &FieldImage,
    i: usize,
    starts: &[PixelIndex],
    config: &MhConfig,
) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    if starts.is_empty() {
        return Err(ScramError::InvalidConfig("chains need at least one starting mode".into()));
    }
    if config.steps == 0 {
        return Err(ScramError::InvalidConfig("steps must be >= 1".into()));
    }
    let chains = config.chains.unwrap_or(starts.len());
    if chains == 0 {
        return Err(ScramError::InvalidConfig("chains must be >= 1".into()));
    }
    let shape = k.shape();
    if starts.iter().any(|s| !shape.contains(*s)) {
        return Err(ScramError::InvalidShape("chain start outside key field".into()));
    }
    let proposal = RbfProposal::new(config.phi)?;
    let scale = inv_sqrt_depth(q.depth());
    let qi = q.vector(i);
    let log_target = |j: usize| scaled_dot(qi, k.vector(j), scale);

    let results: Vec<(Vec<usize>, f64)> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(config.seed, &[domain::MH, i as u64, c as u64]);
            let mut state = starts[c % starts.len()].linear(shape.width);
            let mut current = log_target(state);
            let mut visited = Vec::with_capacity(config.steps + 1);
            visited.push(state);
            let mut accepted = 0usize;
            let mut evaluated = 0usize;
            for _ in 0..config.steps {
                let u: f64 = rng.gen();
                if let Some(next) = proposal.propose(shape, state, &mut rng) {
                    evaluated += 1;
                    let candidate = log_target(next);
                    let delta = candidate - current;
                    if delta >= 0.0 || u < delta.exp() {
                        state = next;
                        current = candidate;
                        accepted += 1;
                    }
                }
                visited.push(state);
            }
            let rate = if evaluated == 0 {
                1.0
            } else {
                accepted as f64 / evaluated as f64
            };
            (visited, rate)
        })
        .collect();
    Ok(results.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhDiagnostics {
    /// Acceptance rate of every chain, per query.
    pub acceptance: Vec<Vec<f64>>,
}

impl MhDiagnostics {
    pub fn mean_acceptance(&self) -> f64 {
        let all: Vec<f64> = self.acceptance.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// Metropolis-Hastings estimate: the mean value over every state of every
/// chain, initial states included.
pub fn mh_estimate(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    modes: &ModeSet,
    config: &MhConfig,
) -> Result<(AttentionOutput, MhDiagnostics)> {
    check_qkv(q, k, v, false)?;
    if modes.len() != q.len() {
        return Err(ScramError::DimensionMismatch {
            expected: q.len(),
            found: modes.len(),
        });
    }
    let rates: Vec<Result<Vec<f64>>> = (0..q.len())
        .into_par_iter()
        .map(|i| mh_chains(q, k, i, modes.row(i), config).map(|(_, r)| r))
        .collect();
    let acceptance = rates.into_iter().collect::<Result<Vec<_>>>()?;
    let output = assemble_rows(q.height(), q.width(), v.depth(), |i, acc| {
        let (chains, _) = mh_chains(q, k, i, modes.row(i), config)?;
        let total: usize = chains.iter().map(Vec::len).sum();
        for &j in chains.iter().flatten() {
            for (a, &vv) in acc.iter_mut().zip(v.vector(j)) {
                *a += f64::from(vv);
            }
        }
        for a in acc.iter_mut() {
            *a /= total as f64;
        }
        Ok(false)
    })?;
    Ok((output, MhDiagnostics { acceptance }))
}
