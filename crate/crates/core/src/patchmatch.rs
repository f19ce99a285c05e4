//! Jump-flood PatchMatch over query/key rasters.
//!
//! One pass estimates, for every query pixel, the key pixel with the largest
//! compatibility. Repeating the pass with the earlier results as priors, and a
//! validity policy that forbids re-finding them, yields top-kappa matches.
//!
//! Each iteration reads the previous iteration's field and writes a fresh one,
//! so positions are independent and are processed in parallel. Random draws
//! come from streams keyed by (seed, run, position, iteration).

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{check_qk, inv_sqrt_depth, scaled_dot};
use crate::error::{Result, ScramError};
use crate::field::{FieldImage, PixelIndex, Shape};
use crate::rng::{domain, stream, StreamRng};

/// How matches from earlier runs constrain the current run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidityPolicy {
    /// Top-kappa by value: a key may not repeat an earlier match.
    MaxNonDuplicate,
    /// Top-kappa by mode: a key must lie at Chebyshev distance `> separation`
    /// from every earlier match.
    ModeSeparated { separation: usize },
}

impl ValidityPolicy {
    pub fn validate(self) -> Result<()> {
        match self {
            Self::ModeSeparated { separation: 0 } => Err(ScramError::InvalidConfig(
                "mode separation must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    fn admits(self, candidate: PixelIndex, prior: PixelIndex) -> bool {
        match self {
            Self::MaxNonDuplicate => candidate != prior,
            Self::ModeSeparated { separation } => candidate.chebyshev(prior) > separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMatchConfig {
    pub iterations: usize,
    /// Propagation strides, strictly decreasing and ending at 1.
    pub jumps: Vec<usize>,
    pub seed: u64,
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            jumps: vec![8, 4, 2, 1],
            seed: 0,
        }
    }
}

impl PatchMatchConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(ScramError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.jumps.last() != Some(&1) || self.jumps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(ScramError::InvalidConfig(format!(
                "jump sequence {:?} must be strictly decreasing and end at 1",
                self.jumps
            )));
        }
        Ok(())
    }
}

/// Per query pixel, the matched key pixel. Entries are `None` only in causal
/// runs, at positions whose past holds no admissible key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighbourField {
    shape: Shape,
    key_shape: Shape,
    entries: Vec<Option<PixelIndex>>,
}

impl NeighbourField {
    pub fn new(shape: Shape, key_shape: Shape, entries: Vec<Option<PixelIndex>>) -> Result<Self> {
        if entries.len() != shape.len() {
            return Err(ScramError::DimensionMismatch {
                expected: shape.len(),
                found: entries.len(),
            });
        }
        if entries.iter().flatten().any(|p| !key_shape.contains(*p)) {
            return Err(ScramError::InvalidShape("match outside key field".into()));
        }
        Ok(Self {
            shape,
            key_shape,
            entries,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn key_shape(&self) -> Shape {
        self.key_shape
    }

    pub fn entries(&self) -> &[Option<PixelIndex>] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, query: usize) -> Option<PixelIndex> {
        self.entries[query]
    }

    /// Sum over matched queries of the compatibility with their match.
    pub fn objective(&self, q: &FieldImage, k: &FieldImage) -> f64 {
        let scale = inv_sqrt_depth(q.depth());
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|p| scaled_dot(q.vector(i), k.at(p), scale)))
            .sum()
    }
}

/// Neighbour directions used by propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Self::Up, Self::Down, Self::Left, Self::Right];

    fn offset(self) -> (isize, isize) {
        match self {
            Self::Up => (-1, 0),
            Self::Down => (1, 0),
            Self::Left => (0, -1),
            Self::Right => (0, 1),
        }
    }

    /// Up and left neighbours precede the query in row-major order.
    fn reads_past(self) -> bool {
        matches!(self, Self::Up | Self::Left)
    }
}

#[inline]
fn shifted(p: PixelIndex, dy: isize, dx: isize, bounds: Shape) -> Option<PixelIndex> {
    let y = p.y.checked_add_signed(dy)?;
    let x = p.x.checked_add_signed(dx)?;
    let q = PixelIndex::new(y, x);
    bounds.contains(q).then_some(q)
}

/// Checks a candidate for query position `pos` against the priors.
pub fn is_index_valid(
    candidate: PixelIndex,
    pos: PixelIndex,
    priors: &[NeighbourField],
    policy: ValidityPolicy,
) -> bool {
    priors.iter().all(|f| {
        f.get(pos.linear(f.shape.width))
            .is_none_or(|prior| policy.admits(candidate, prior))
    })
}

/// Policy, priors and causal mask bundled for the inner loop.
struct Validity<'a> {
    priors: &'a [NeighbourField],
    policy: ValidityPolicy,
    causal: bool,
    key_width: usize,
}

impl Validity<'_> {
    #[inline]
    fn check(&self, candidate: PixelIndex, query: usize) -> bool {
        if self.causal && candidate.linear(self.key_width) >= query {
            return false;
        }
        self.priors.iter().all(|f| {
            f.entries[query].is_none_or(|prior| self.policy.admits(candidate, prior))
        })
    }
}

/// Candidate obtained from the match of the neighbour `jump` pixels away in
/// `direction`, displaced back by the same offset.
pub fn propagate_candidate(
    pos: PixelIndex,
    direction: Direction,
    jump: usize,
    current: &NeighbourField,
) -> Option<PixelIndex> {
    let (dy, dx) = direction.offset();
    let (dy, dx) = (dy * jump as isize, dx * jump as isize);
    let neighbour = shifted(pos, dy, dx, current.shape)?;
    let matched = current.get(neighbour.linear(current.shape.width))?;
    shifted(matched, -dy, -dx, current.key_shape)
}

/// Search radii `R, R/2, ..., 1` with `R = max(H, W)` of the key field.
pub fn search_radii(key_shape: Shape) -> Vec<usize> {
    let mut r = key_shape.height.max(key_shape.width);
    let mut radii = Vec::new();
    while r >= 1 {
        radii.push(r);
        r /= 2;
    }
    radii
}

/// Draws a key uniformly from the square window of half-width `radius`
/// around `center`, clipped to the key field.
#[inline]
fn sample_window(center: PixelIndex, radius: usize, key_shape: Shape, rng: &mut StreamRng) -> PixelIndex {
    let y0 = center.y.saturating_sub(radius);
    let y1 = (center.y + radius).min(key_shape.height - 1);
    let x0 = center.x.saturating_sub(radius);
    let x1 = (center.x + radius).min(key_shape.width - 1);
    PixelIndex::new(rng.gen_range(y0..=y1), rng.gen_range(x0..=x1))
}

/// One random-search candidate per radius, each centred on `best`.
pub fn random_search_candidates(
    best: PixelIndex,
    key_shape: Shape,
    rng: &mut StreamRng,
) -> Vec<PixelIndex> {
    search_radii(key_shape)
        .into_iter()
        .map(|r| sample_window(best, r, key_shape, rng))
        .collect()
}

/// Random initial field, each entry drawn uniformly from admissible keys.
pub fn init_random(
    shape: Shape,
    key_shape: Shape,
    policy: ValidityPolicy,
    priors: &[NeighbourField],
    causal: bool,
    seed: u64,
    run: u64,
) -> Result<NeighbourField> {
    const RETRIES: usize = 32;
    if causal && shape != key_shape {
        return Err(ScramError::MaskShape);
    }
    let validity = Validity {
        priors,
        policy,
        causal,
        key_width: key_shape.width,
    };
    let n_k = key_shape.len();
    let entries: Vec<Option<PixelIndex>> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let limit = if causal { i.min(n_k) } else { n_k };
            if limit == 0 {
                return None;
            }
            let mut rng = stream(seed, &[domain::PATCHMATCH_INIT, run, i as u64]);
            for _ in 0..RETRIES {
                let c = key_shape.pixel(rng.gen_range(0..limit));
                if validity.check(c, i) {
                    return Some(c);
                }
            }
            let start = rng.gen_range(0..limit);
            (0..limit)
                .map(|o| key_shape.pixel((start + o) % limit))
                .find(|&c| validity.check(c, i))
        })
        .collect();
    if !causal {
        if let Some(position) = entries.iter().position(Option::is_none) {
            return Err(ScramError::InfeasiblePolicy { position });
        }
    }
    NeighbourField::new(shape, key_shape, entries)
}

/// Runs one PatchMatch pass: random initialisation followed by
/// `config.iterations` rounds of propagation and random search. A candidate
/// replaces the current match only if it is admissible and strictly better.
///
/// `run` selects the random streams; `top_kappa` passes the rank index.
pub fn patchmatch_pass(
    q: &FieldImage,
    k: &FieldImage,
    config: &PatchMatchConfig,
    policy: ValidityPolicy,
    priors: &[NeighbourField],
    causal: bool,
    run: u64,
) -> Result<NeighbourField> {
    config.validate()?;
    policy.validate()?;
    check_qk(q, k, causal)?;
    let shape = q.shape();
    let key_shape = k.shape();
    if priors.iter().any(|p| p.shape != shape || p.key_shape != key_shape) {
        return Err(ScramError::InvalidShape("prior field shape mismatch".into()));
    }
    let mut field = init_random(shape, key_shape, policy, priors, causal, config.seed, run)?;
    let validity = Validity {
        priors,
        policy,
        causal,
        key_width: key_shape.width,
    };
    let radii = search_radii(key_shape);
    let scale = inv_sqrt_depth(q.depth());

    for t in 0..config.iterations {
        let prev = &field;
        let entries: Vec<Option<PixelIndex>> = (0..shape.len())
            .into_par_iter()
            .map(|i| {
                let mut best = prev.entries[i]?;
                let qi = q.vector(i);
                let mut best_score = scaled_dot(qi, k.at(best), scale);
                let pos = shape.pixel(i);
                let consider = |c: PixelIndex, best: &mut PixelIndex, best_score: &mut f64| {
                    if validity.check(c, i) {
                        let s = scaled_dot(qi, k.at(c), scale);
                        if s > *best_score {
                            *best = c;
                            *best_score = s;
                        }
                    }
                };
                for &jump in &config.jumps {
                    for dir in Direction::ALL {
                        if causal && !dir.reads_past() {
                            continue;
                        }
                        if let Some(c) = propagate_candidate(pos, dir, jump, prev) {
                            consider(c, &mut best, &mut best_score);
                        }
                    }
                }
                let mut rng = stream(
                    config.seed,
                    &[domain::PATCHMATCH_SEARCH, run, i as u64, t as u64],
                );
                for &r in &radii {
                    let c = sample_window(best, r, key_shape, &mut rng);
                    consider(c, &mut best, &mut best_score);
                }
                Some(best)
            })
            .collect();
        field = NeighbourField {
            shape,
            key_shape,
            entries,
        };
    }
    Ok(field)
}

/// `kappa` sequential passes; pass `r` treats passes `0..r` as priors.
pub fn top_kappa(
    q: &FieldImage,
    k: &FieldImage,
    kappa: usize,
    policy: ValidityPolicy,
    config: &PatchMatchConfig,
    causal: bool,
) -> Result<Vec<NeighbourField>> {
    if kappa == 0 {
        return Err(ScramError::InvalidConfig("kappa must be >= 1".into()));
    }
    if kappa > k.len() {
        return Err(ScramError::KappaTooLarge { kappa, n: k.len() });
    }
    let mut fields: Vec<NeighbourField> = Vec::with_capacity(kappa);
    for run in 0..kappa {
        let f = patchmatch_pass(q, k, config, policy, &fields, causal, run as u64)?;
        fields.push(f);
    }
    Ok(fields)
}

/// Exhaustive post-hoc check of a top-kappa result: bounds, policy against
/// every earlier field, the causal mask, and that empty entries occur only
/// where no admissible key exists.
pub fn verify_fields(
    fields: &[NeighbourField],
    policy: ValidityPolicy,
    causal: bool,
) -> std::result::Result<(), String> {
    for (r, f) in fields.iter().enumerate() {
        for (i, e) in f.entries.iter().enumerate() {
            let pos = f.shape.pixel(i);
            match e {
                Some(p) => {
                    if !f.key_shape.contains(*p) {
                        return Err(format!("run {r} query {i}: {p:?} out of bounds"));
                    }
                    if causal && p.linear(f.key_shape.width) >= i {
                        return Err(format!("run {r} query {i}: {p:?} is in the future"));
                    }
                    if !is_index_valid(*p, pos, &fields[..r], policy) {
                        return Err(format!("run {r} query {i}: {p:?} violates {policy:?}"));
                    }
                }
                None => {
                    let limit = if causal { i.min(f.key_shape.len()) } else { f.key_shape.len() };
                    let exists = (0..limit)
                        .any(|j| is_index_valid(f.key_shape.pixel(j), pos, &fields[..r], policy));
                    if exists {
                        return Err(format!("run {r} query {i}: empty but a valid key exists"));
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::top_k_exact;
    use crate::synth::uniform_field;

    fn constant_field(h: usize, w: usize, kh: usize, kw: usize, m: PixelIndex) -> NeighbourField {
        NeighbourField::new(Shape::new(h, w), Shape::new(kh, kw), vec![Some(m); h * w]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PatchMatchConfig::default().validate().is_ok());
        let mut c = PatchMatchConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
        c = PatchMatchConfig {
            jumps: vec![4, 4, 1],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.jumps = vec![8, 4, 2];
        assert!(c.validate().is_err());
        assert!(ValidityPolicy::ModeSeparated { separation: 0 }.validate().is_err());
    }

    #[test]
    fn init_single_pixel() {
        let s = Shape::new(1, 1);
        let f = init_random(s, s, ValidityPolicy::MaxNonDuplicate, &[], false, 3, 0).unwrap();
        assert_eq!(f.entries(), &[Some(PixelIndex::new(0, 0))]);
    }

    #[test]
    fn init_pigeonhole_is_infeasible() {
        let s = Shape::new(1, 2);
        let priors = vec![
            NeighbourField::new(s, s, vec![Some(PixelIndex::new(0, 0)); 2]).unwrap(),
            NeighbourField::new(s, s, vec![Some(PixelIndex::new(0, 1)); 2]).unwrap(),
        ];
        assert_eq!(
            init_random(s, s, ValidityPolicy::MaxNonDuplicate, &priors, false, 0, 2),
            Err(ScramError::InfeasiblePolicy { position: 0 })
        );
    }

    #[test]
    fn init_is_deterministic() {
        let s = Shape::new(4, 4);
        let a = init_random(s, s, ValidityPolicy::MaxNonDuplicate, &[], false, 42, 0).unwrap();
        let b = init_random(s, s, ValidityPolicy::MaxNonDuplicate, &[], false, 42, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn propagation_rules() {
        let f = constant_field(4, 4, 4, 4, PixelIndex::new(1, 1));
        // Left neighbour of column 0 lies outside the image.
        assert_eq!(propagate_candidate(PixelIndex::new(2, 0), Direction::Left, 1, &f), None);
        assert_eq!(
            propagate_candidate(PixelIndex::new(2, 2), Direction::Left, 1, &f),
            Some(PixelIndex::new(1, 2))
        );
        assert_eq!(
            propagate_candidate(PixelIndex::new(2, 2), Direction::Down, 1, &f),
            Some(PixelIndex::new(0, 1))
        );
        // Shift leaves the key field.
        let edge = constant_field(4, 4, 4, 4, PixelIndex::new(0, 3));
        assert_eq!(propagate_candidate(PixelIndex::new(2, 2), Direction::Left, 1, &edge), None);

        let s = Shape::new(5, 5);
        let identity =
            NeighbourField::new(s, s, (0..25).map(|i| Some(s.pixel(i))).collect()).unwrap();
        for i in 0..25 {
            let p = s.pixel(i);
            for dir in Direction::ALL {
                for jump in [1, 2, 4] {
                    if let Some(c) = propagate_candidate(p, dir, jump, &identity) {
                        assert_eq!(c, p);
                    }
                }
            }
        }
    }

    #[test]
    fn validity_examples() {
        let s = Shape::new(8, 8);
        let p = PixelIndex::new(0, 0);
        let c = PixelIndex::new(5, 5);
        assert!(is_index_valid(c, p, &[], ValidityPolicy::MaxNonDuplicate));
        let prior = vec![constant_field(8, 8, 8, 8, c)];
        assert!(!is_index_valid(c, p, &prior, ValidityPolicy::MaxNonDuplicate));
        let prior = vec![constant_field(8, 8, 8, 8, PixelIndex::new(3, 3))];
        let mode = ValidityPolicy::ModeSeparated { separation: 2 };
        assert!(!is_index_valid(PixelIndex::new(5, 5), p, &prior, mode));
        assert!(is_index_valid(PixelIndex::new(6, 6), p, &prior, mode));
        let _ = s;
    }

    #[test]
    fn radii_and_search() {
        assert_eq!(search_radii(Shape::new(8, 8)), vec![8, 4, 2, 1]);
        assert_eq!(search_radii(Shape::new(12, 3)), vec![12, 6, 3, 1]);
        assert_eq!(search_radii(Shape::new(1, 1)), vec![1]);
        for r in [1usize, 2, 5, 8, 13, 100, 128] {
            let n = search_radii(Shape::new(r, 1)).len();
            assert_eq!(n, (r as f64).log2().floor() as usize + 1);
        }

        let mut rng = stream(1, &[0]);
        let c = random_search_candidates(PixelIndex::new(0, 0), Shape::new(1, 1), &mut rng);
        assert_eq!(c, vec![PixelIndex::new(0, 0)]);

        let ks = Shape::new(8, 8);
        let a = random_search_candidates(PixelIndex::new(3, 4), ks, &mut stream(9, &[1]));
        let b = random_search_candidates(PixelIndex::new(3, 4), ks, &mut stream(9, &[1]));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for (cand, r) in a.iter().zip([8usize, 4, 2, 1]) {
            assert!(ks.contains(*cand));
            assert!(cand.chebyshev(PixelIndex::new(3, 4)) <= r);
        }
    }

    #[test]
    fn constant_keys_any_field_is_optimal() {
        let q = uniform_field(6, 6, 3, 1);
        let k = FieldImage::from_fn(6, 6, 3, |_, _, c| [0.2, -0.4, 0.9][c]).unwrap();
        let f = patchmatch_pass(&q, &k, &PatchMatchConfig::default(), ValidityPolicy::MaxNonDuplicate, &[], false, 0)
            .unwrap();
        let expected: f64 = (0..36)
            .map(|i| crate::attention::compatibility(q.vector(i), k.vector(0)).unwrap())
            .sum();
        assert!((f.objective(&q, &k) - expected).abs() < 1e-9);
    }

    #[test]
    fn finds_argmax_on_self_matching_field() {
        // Unit vectors at distinct angles: each query's best key is itself.
        let n = 16;
        let q = FieldImage::from_fn(4, 4, 2, |y, x, c| {
            let a = (y * 4 + x) as f32 / n as f32 * std::f32::consts::TAU;
            if c == 0 { a.cos() } else { a.sin() }
        })
        .unwrap();
        let f = patchmatch_pass(&q, &q, &PatchMatchConfig::with_seed(5), ValidityPolicy::MaxNonDuplicate, &[], false, 0)
            .unwrap();
        let exact = top_k_exact(&q, &q, 1).unwrap();
        let hits = (0..n).filter(|&i| f.get(i) == Some(exact[i][0])).count();
        assert!(hits as f64 >= 0.9 * n as f64, "hits {hits}");
    }

    #[test]
    fn pass_is_deterministic_and_monotone() {
        let q = uniform_field(10, 9, 3, 1);
        let k = uniform_field(7, 11, 3, 2);
        let mut prev_obj = f64::NEG_INFINITY;
        for t in 1..=6 {
            let cfg = PatchMatchConfig {
                iterations: t,
                ..PatchMatchConfig::with_seed(77)
            };
            let a = patchmatch_pass(&q, &k, &cfg, ValidityPolicy::MaxNonDuplicate, &[], false, 0).unwrap();
            let b = patchmatch_pass(&q, &k, &cfg, ValidityPolicy::MaxNonDuplicate, &[], false, 0).unwrap();
            assert_eq!(a, b);
            let obj = a.objective(&q, &k);
            assert!(obj >= prev_obj);
            prev_obj = obj;
        }
    }

    #[test]
    fn kappa_one_is_single_pass() {
        let q = uniform_field(5, 5, 2, 1);
        let k = uniform_field(5, 5, 2, 2);
        let cfg = PatchMatchConfig::with_seed(3);
        let fields = top_kappa(&q, &k, 1, ValidityPolicy::MaxNonDuplicate, &cfg, false).unwrap();
        let single = patchmatch_pass(&q, &k, &cfg, ValidityPolicy::MaxNonDuplicate, &[], false, 0).unwrap();
        assert_eq!(fields, vec![single]);
    }

    #[test]
    fn kappa_n_covers_every_key() {
        let q = uniform_field(2, 2, 2, 1);
        let k = uniform_field(2, 2, 2, 2);
        let fields =
            top_kappa(&q, &k, 4, ValidityPolicy::MaxNonDuplicate, &PatchMatchConfig::default(), false)
                .unwrap();
        for i in 0..4 {
            let mut got: Vec<usize> = fields.iter().map(|f| f.get(i).unwrap().linear(2)).collect();
            got.sort();
            assert_eq!(got, vec![0, 1, 2, 3]);
        }
        verify_fields(&fields, ValidityPolicy::MaxNonDuplicate, false).unwrap();
        assert!(matches!(
            top_kappa(&q, &k, 5, ValidityPolicy::MaxNonDuplicate, &PatchMatchConfig::default(), false),
            Err(ScramError::KappaTooLarge { .. })
        ));
    }

    #[test]
    fn mode_policy_infeasible_fails_loudly() {
        let q = uniform_field(3, 3, 2, 1);
        let k = uniform_field(3, 3, 2, 2);
        let policy = ValidityPolicy::ModeSeparated { separation: 2 };
        assert!(matches!(
            top_kappa(&q, &k, 2, policy, &PatchMatchConfig::default(), false),
            Err(ScramError::InfeasiblePolicy { .. })
        ));
    }

    #[test]
    fn causal_fields_respect_mask() {
        let q = uniform_field(6, 6, 3, 1);
        let k = uniform_field(6, 6, 3, 2);
        for policy in [ValidityPolicy::MaxNonDuplicate, ValidityPolicy::ModeSeparated { separation: 1 }] {
            let fields = top_kappa(&q, &k, 3, policy, &PatchMatchConfig::default(), true).unwrap();
            verify_fields(&fields, policy, true).unwrap();
            assert_eq!(fields[0].get(0), None);
            assert_eq!(fields[0].get(1), Some(PixelIndex::new(0, 0)));
        }
    }
}
