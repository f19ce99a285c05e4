//! The sparse forward pass: top-kappa PatchMatch, square-window expansion of
//! each match, and softmax restricted to the resulting key set.

use rayon::prelude::*;

use crate::attention::{assemble_rows, check_qkv, inv_sqrt_depth, scaled_dot, softmax_in_place, AttentionOutput};
use crate::error::{Result, ScramError};
use crate::field::{FieldImage, PixelIndex, Shape};
use crate::patchmatch::{top_kappa, NeighbourField, PatchMatchConfig, ValidityPolicy};

/// Causal rule: key `j` is hidden from query `i` unless it strictly precedes
/// `i` in row-major order.
#[inline]
pub fn causal_mask_positions(i: usize, j: usize) -> bool {
    j >= i
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScramConfig {
    pub kappa: usize,
    /// Half-width of the square window expanded around each match.
    pub radius: usize,
    pub policy: ValidityPolicy,
    pub patchmatch: PatchMatchConfig,
    pub causal: bool,
}

impl Default for ScramConfig {
    fn default() -> Self {
        Self {
            kappa: 1,
            radius: 0,
            policy: ValidityPolicy::MaxNonDuplicate,
            patchmatch: PatchMatchConfig::default(),
            causal: false,
        }
    }
}

/// Per-query sorted, deduplicated key indices (row-major), stored as CSR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseIndexSets {
    key_shape: Shape,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl SparseIndexSets {
    /// Builds sets from arbitrary per-query index lists.
    pub fn from_rows(key_shape: Shape, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            if r.last().is_some_and(|&j| j >= key_shape.len()) {
                return Err(ScramError::InvalidShape("key index out of bounds".into()));
            }
            indices.extend(r);
            offsets.push(indices.len());
        }
        Ok(Self {
            key_shape,
            offsets,
            indices,
        })
    }

    pub fn from_pixels(key_shape: Shape, rows: &[Vec<PixelIndex>]) -> Result<Self> {
        Self::from_rows(
            key_shape,
            rows.iter()
                .map(|r| r.iter().map(|p| p.linear(key_shape.width)).collect())
                .collect(),
        )
    }

    /// Every query attends to every key.
    pub fn full(queries: usize, key_shape: Shape) -> Self {
        Self::from_rows(key_shape, vec![(0..key_shape.len()).collect(); queries])
            .expect("in-bounds by construction")
    }

    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn key_shape(&self) -> Shape {
        self.key_shape
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn pixels(&self, i: usize) -> impl Iterator<Item = PixelIndex> + '_ {
        let s = self.key_shape;
        self.row(i).iter().map(move |&j| s.pixel(j))
    }
}

/// Unions the `(2b+1)^2` windows around each query's matches, clipped to the
/// key field. With `causal`, keys at or after the query are dropped.
pub fn expand_neighbourhood(
    fields: &[NeighbourField],
    radius: usize,
    causal: bool,
) -> Result<SparseIndexSets> {
    let first = fields
        .first()
        .ok_or_else(|| ScramError::InvalidConfig("no neighbour fields to expand".into()))?;
    let shape = first.shape();
    let key_shape = first.key_shape();
    if fields.iter().any(|f| f.shape() != shape || f.key_shape() != key_shape) {
        return Err(ScramError::InvalidShape("neighbour fields disagree in shape".into()));
    }
    let rows: Vec<Vec<usize>> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(fields.len() * (2 * radius + 1).pow(2));
            for f in fields {
                let Some(m) = f.get(i) else { continue };
                let y0 = m.y.saturating_sub(radius);
                let y1 = (m.y + radius).min(key_shape.height - 1);
                let x0 = m.x.saturating_sub(radius);
                let x1 = (m.x + radius).min(key_shape.width - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let j = y * key_shape.width + x;
                        if !(causal && causal_mask_positions(i, j)) {
                            row.push(j);
                        }
                    }
                }
            }
            row.sort_unstable();
            row.dedup();
            row
        })
        .collect();
    SparseIndexSets::from_rows(key_shape, rows)
}

/// Normalized weights of query `i` over its set, paired with key indices.
/// Returns `None` when every key of the row is masked.
pub fn sparse_weights(
    q: &FieldImage,
    k: &FieldImage,
    sets: &SparseIndexSets,
    i: usize,
    causal: bool,
) -> Option<Vec<(usize, f64)>> {
    let scale = inv_sqrt_depth(q.depth());
    let qi = q.vector(i);
    let row = sets.row(i);
    let mut scores: Vec<f64> = row
        .iter()
        .map(|&j| {
            if causal && causal_mask_positions(i, j) {
                f64::NEG_INFINITY
            } else {
                scaled_dot(qi, k.vector(j), scale)
            }
        })
        .collect();
    softmax_in_place(&mut scores).ok()?;
    Some(row.iter().copied().zip(scores).collect())
}

/// Softmax attention restricted to each query's key set.
pub fn sparse_attention_output(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    sets: &SparseIndexSets,
    causal: bool,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, causal)?;
    if sets.queries() != q.len() || sets.key_shape() != k.shape() {
        return Err(ScramError::InvalidShape("index sets do not match the fields".into()));
    }
    assemble_rows(q.height(), q.width(), v.depth(), |i, acc| {
        let Some(weights) = sparse_weights(q, k, sets, i, causal) else {
            return Ok(true);
        };
        for (j, p) in weights {
            for (a, &vv) in acc.iter_mut().zip(v.vector(j)) {
                *a += p * f64::from(vv);
            }
        }
        Ok(false)
    })
}

/// Intermediate products of a forward pass.
#[derive(Debug, Clone)]
pub struct ScramRun {
    pub fields: Vec<NeighbourField>,
    pub sets: SparseIndexSets,
    pub output: AttentionOutput,
}

pub fn scram_run(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    config: &ScramConfig,
) -> Result<ScramRun> {
    check_qkv(q, k, v, config.causal)?;
    let fields = top_kappa(q, k, config.kappa, config.policy, &config.patchmatch, config.causal)?;
    let sets = expand_neighbourhood(&fields, config.radius, config.causal)?;
    let output = sparse_attention_output(q, k, v, &sets, config.causal)?;
    Ok(ScramRun {
        fields,
        sets,
        output,
    })
}

/// Approximate attention output: top-kappa search, window expansion, then
/// sparse softmax.
pub fn scram_forward(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    config: &ScramConfig,
) -> Result<AttentionOutput> {
    scram_run(q, k, v, config).map(|r| r.output)
}
