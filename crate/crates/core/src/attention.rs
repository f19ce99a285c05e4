//! Scaled dot-product compatibility, softmax, and the exact O(n^2) attention
//! that every approximation in this crate is measured against.

use rayon::prelude::*;

use crate::error::{Result, ScramError};
use crate::field::{FieldImage, PixelIndex};
use crate::forward::causal_mask_positions;

/// Per-query output raster plus a flag for queries whose score row was
/// entirely masked (those carry a zero vector).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub values: FieldImage,
    pub degenerate: Vec<bool>,
}

/// Dense `n_q x n_k` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub queries: usize,
    pub keys: usize,
    pub probs: Vec<f64>,
}

impl AttentionWeights {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.keys..(i + 1) * self.keys]
    }
}

/// `(q . k) / sqrt(d_k)` with `d_k = q.len()`.
pub fn compatibility(q: &[f32], k: &[f32]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(ScramError::DimensionMismatch {
            expected: q.len(),
            found: k.len(),
        });
    }
    if q.is_empty() {
        return Err(ScramError::InvalidShape("empty feature vector".into()));
    }
    Ok(scaled_dot(q, k, inv_sqrt_depth(q.len())))
}

#[inline]
pub(crate) fn inv_sqrt_depth(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

#[inline]
pub(crate) fn scaled_dot(q: &[f32], k: &[f32], scale: f64) -> f64 {
    let mut acc = 0.0f64;
    for (a, b) in q.iter().zip(k) {
        acc += f64::from(*a) * f64::from(*b);
    }
    acc * scale
}

/// Max-subtracted softmax over one score row. `-inf` entries get weight 0.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ScramError::DegenerateRow);
    }
    let mut sum = 0.0;
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
    Ok(())
}

pub(crate) fn check_qk(q: &FieldImage, k: &FieldImage, causal: bool) -> Result<()> {
    if q.depth() != k.depth() {
        return Err(ScramError::DimensionMismatch {
            expected: q.depth(),
            found: k.depth(),
        });
    }
    if causal && q.shape() != k.shape() {
        return Err(ScramError::MaskShape);
    }
    Ok(())
}

pub(crate) fn check_qkv(q: &FieldImage, k: &FieldImage, v: &FieldImage, causal: bool) -> Result<()> {
    check_qk(q, k, causal)?;
    if k.shape() != v.shape() {
        return Err(ScramError::InvalidShape(format!(
            "keys are {}x{} but values are {}x{}",
            k.height(),
            k.width(),
            v.height(),
            v.width()
        )));
    }
    Ok(())
}

/// Fills `scores` with the compatibility of query `i` against every key,
/// `-inf` where the causal mask applies.
fn score_row(q: &FieldImage, k: &FieldImage, i: usize, causal: bool, scores: &mut [f64]) {
    let scale = inv_sqrt_depth(q.depth());
    let qi = q.vector(i);
    for (j, s) in scores.iter_mut().enumerate() {
        *s = if causal && causal_mask_positions(i, j) {
            f64::NEG_INFINITY
        } else {
            scaled_dot(qi, k.vector(j), scale)
        };
    }
}

/// Builds the output raster from per-query rows computed in parallel.
pub(crate) fn assemble_rows<F>(
    height: usize,
    width: usize,
    depth: usize,
    row: F,
) -> Result<AttentionOutput>
where
    F: Fn(usize, &mut [f64]) -> Result<bool> + Sync,
{
    let n = height * width;
    let rows: Vec<Result<(Vec<f64>, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0f64; depth];
            let degenerate = row(i, &mut acc)?;
            Ok((acc, degenerate))
        })
        .collect();
    let mut data = Vec::with_capacity(n * depth);
    let mut degenerate = Vec::with_capacity(n);
    for r in rows {
        let (acc, d) = r?;
        data.extend(acc.iter().map(|&v| v as f32));
        degenerate.push(d);
    }
    Ok(AttentionOutput {
        values: FieldImage::new(height, width, depth, data)?,
        degenerate,
    })
}

/// Exact softmax attention `o_i = sum_j p_ij v_j` over all keys.
///
/// With `causal`, query `i` sees only keys at row-major positions `< i`; the
/// first query then has an empty row and is flagged degenerate.
pub fn full_attention(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    causal: bool,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, causal)?;
    let n_k = k.len();
    assemble_rows(q.height(), q.width(), v.depth(), |i, acc| {
        let mut scores = vec![0.0f64; n_k];
        score_row(q, k, i, causal, &mut scores);
        match softmax_in_place(&mut scores) {
            Ok(()) => {}
            Err(ScramError::DegenerateRow) => return Ok(true),
            Err(e) => return Err(e),
        }
        for (j, &p) in scores.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (a, &vv) in acc.iter_mut().zip(v.vector(j)) {
                *a += p * f64::from(vv);
            }
        }
        Ok(false)
    })
}

/// The dense attention matrix. Fully masked rows are left as zeros.
pub fn full_attention_weights(
    q: &FieldImage,
    k: &FieldImage,
    causal: bool,
) -> Result<AttentionWeights> {
    check_qk(q, k, causal)?;
    let n_k = k.len();
    let mut probs = vec![0.0f64; q.len() * n_k];
    probs
        .par_chunks_mut(n_k)
        .enumerate()
        .try_for_each(|(i, row)| {
            score_row(q, k, i, causal, row);
            match softmax_in_place(row) {
                Err(ScramError::DegenerateRow) => {
                    row.fill(0.0);
                    Ok(())
                }
                other => other,
            }
        })?;
    Ok(AttentionWeights {
        queries: q.len(),
        keys: n_k,
        probs,
    })
}

/// Generalized non-local mean `y_i = sum_j f(q_i, k_j) v_j / sum_l f(q_i, k_l)`.
pub fn nonlocal_mean<F>(
    q: &FieldImage,
    k: &FieldImage,
    v: &FieldImage,
    f: F,
) -> Result<AttentionOutput>
where
    F: Fn(&[f32], &[f32]) -> f64 + Sync,
{
    check_qkv(q, k, v, false)?;
    assemble_rows(q.height(), q.width(), v.depth(), |i, acc| {
        let qi = q.vector(i);
        let mut norm = 0.0f64;
        for j in 0..k.len() {
            let w = f(qi, k.vector(j));
            if w == 0.0 {
                continue;
            }
            norm += w;
            for (a, &vv) in acc.iter_mut().zip(v.vector(j)) {
                *a += w * f64::from(vv);
            }
        }
        if norm <= 0.0 || !norm.is_finite() {
            return Err(ScramError::DegenerateNormalizer { query: i });
        }
        for a in acc.iter_mut() {
            *a /= norm;
        }
        Ok(false)
    })
}

/// Keys sorted by descending compatibility with `qi`, ties by ascending index.
fn ranked_keys(qi: &[f32], k: &FieldImage, take: usize) -> Vec<usize> {
    let scale = inv_sqrt_depth(k.depth());
    let scores: Vec<f64> = (0..k.len())
        .map(|j| scaled_dot(qi, k.vector(j), scale))
        .collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..k.len()).collect();
    if take < idx.len() {
        idx.select_nth_unstable_by(take, order);
        idx.truncate(take);
    }
    idx.sort_unstable_by(order);
    idx
}

/// The `kappa` most compatible keys per query, best first.
pub fn top_k_exact(q: &FieldImage, k: &FieldImage, kappa: usize) -> Result<Vec<Vec<PixelIndex>>> {
    check_qk(q, k, false)?;
    if kappa > k.len() {
        return Err(ScramError::KappaTooLarge { kappa, n: k.len() });
    }
    let shape = k.shape();
    Ok((0..q.len())
        .into_par_iter()
        .map(|i| {
            ranked_keys(q.vector(i), k, kappa)
                .into_iter()
                .map(|j| shape.pixel(j))
                .collect()
        })
        .collect())
}

/// Greedy spatially separated top-`kappa`: repeatedly takes the best key whose
/// Chebyshev distance to every key already taken exceeds `separation`.
pub fn top_k_mode_exact(
    q: &FieldImage,
    k: &FieldImage,
    kappa: usize,
    separation: usize,
) -> Result<Vec<Vec<PixelIndex>>> {
    check_qk(q, k, false)?;
    if kappa > k.len() {
        return Err(ScramError::KappaTooLarge { kappa, n: k.len() });
    }
    let shape = k.shape();
    (0..q.len())
        .into_par_iter()
        .map(|i| {
            let mut picked: Vec<PixelIndex> = Vec::with_capacity(kappa);
            for j in ranked_keys(q.vector(i), k, k.len()) {
                if picked.len() == kappa {
                    break;
                }
                let p = shape.pixel(j);
                if picked.iter().all(|s| s.chebyshev(p) > separation) {
                    picked.push(p);
                }
            }
            if picked.len() < kappa {
                return Err(ScramError::InfeasibleSeparation {
                    query: i,
                    kappa,
                    separation,
                    found: picked.len(),
                });
            }
            Ok(picked)
        })
        .collect()
}
