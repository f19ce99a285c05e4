//! Synthetic query/key/value generators.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Result, ScramError};
use crate::field::{FieldImage, PixelIndex, Shape};
use crate::rng::{domain, stream};

/// Independent uniform scalars in `[-1, 1)`.
pub fn uniform_field(height: usize, width: usize, depth: usize, seed: u64) -> FieldImage {
    let mut rng = stream(seed, &[domain::SYNTH, 0]);
    FieldImage::from_fn(height, width, depth, |_, _, _| rng.gen_range(-1.0f32..1.0))
        .expect("uniform field dimensions must be positive")
}

/// An isotropic Gaussian bump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: PixelIndex,
    pub amplitude: f64,
    pub width: f64,
}

/// Sum of Gaussian bumps, the same value broadcast to every channel.
pub fn gen_blobs(shape: Shape, depth: usize, blobs: &[Blob]) -> Result<FieldImage> {
    FieldImage::from_fn(shape.height, shape.width, depth, |y, x, _| {
        blobs
            .iter()
            .map(|b| {
                let dy = y as f64 - b.center.y as f64;
                let dx = x as f64 - b.center.x as f64;
                b.amplitude * (-(dy * dy + dx * dx) / (2.0 * b.width * b.width)).exp()
            })
            .sum::<f64>() as f32
    })
}

/// Places `count` blobs with pairwise Chebyshev distance above
/// `min_separation`, at least `margin` pixels from the border. Amplitudes
/// step down by 10% per blob so the peaks are strictly ordered.
pub fn random_blobs(
    shape: Shape,
    count: usize,
    amplitude: f64,
    width: f64,
    min_separation: usize,
    margin: usize,
    seed: u64,
) -> Result<Vec<Blob>> {
    const ATTEMPTS: usize = 10_000;
    if 2 * margin >= shape.height.min(shape.width) && count > 0 {
        return Err(ScramError::InvalidConfig("blob margin leaves no room".into()));
    }
    let mut rng = stream(seed, &[domain::SYNTH, 1]);
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..ATTEMPTS {
        if blobs.len() == count {
            break;
        }
        let c = PixelIndex::new(
            rng.gen_range(margin..shape.height - margin),
            rng.gen_range(margin..shape.width - margin),
        );
        if blobs.iter().all(|b| b.center.chebyshev(c) > min_separation) {
            blobs.push(Blob {
                center: c,
                amplitude: amplitude * (1.0 - 0.1 * blobs.len() as f64),
                width,
            });
        }
    }
    if blobs.len() < count {
        return Err(ScramError::InvalidConfig(format!(
            "could not place {count} blobs separated by more than {min_separation}"
        )));
    }
    Ok(blobs)
}

/// A spatially coherent attention source: an `n x n` single-channel raster
/// whose row `i` (a query pixel of `shape`) holds two Gaussian bumps over the
/// key pixels. The dominant bump sits at the query's vertically mirrored
/// position plus a seed-dependent offset, the weaker one at the horizontally
/// mirrored position. Neighbouring queries attend to neighbouring keys.
pub fn coherent_source(shape: Shape, amplitude: f64, width: f64, seed: u64) -> Result<FieldImage> {
    let mut rng = stream(seed, &[domain::SYNTH, 2]);
    let (h, w) = (shape.height as f64, shape.width as f64);
    let off1 = (rng.gen_range(-h / 4.0..=h / 4.0), rng.gen_range(-w / 4.0..=w / 4.0));
    let off2 = (rng.gen_range(-h / 4.0..=h / 4.0), rng.gen_range(-w / 4.0..=w / 4.0));
    let n = shape.len();
    let inv = 1.0 / (2.0 * width * width);
    FieldImage::from_fn(n, n, 1, |i, j, _| {
        let qp = shape.pixel(i);
        let kp = shape.pixel(j);
        let (qy, qx) = (qp.y as f64, qp.x as f64);
        let (ky, kx) = (kp.y as f64, kp.x as f64);
        let c1 = (h - 1.0 - qy + off1.0, qx + off1.1);
        let c2 = (qy + off2.0, w - 1.0 - qx + off2.1);
        let d1 = (ky - c1.0).powi(2) + (kx - c1.1).powi(2);
        let d2 = (ky - c2.0).powi(2) + (kx - c2.1).powi(2);
        (amplitude * ((-d1 * inv).exp() + 0.6 * (-d2 * inv).exp())) as f32
    })
}

/// Queries and keys whose scaled inner products reproduce a low-rank
/// approximation of a source raster.
#[derive(Debug, Clone)]
pub struct LowRankQk {
    pub queries: FieldImage,
    pub keys: FieldImage,
    /// Number of non-zero singular values actually used.
    pub effective_rank: usize,
    pub rank_deficient: bool,
}

/// Truncated SVD `S ≈ U_r Σ_r V_rᵀ` of a single-channel source whose rows are
/// the query pixels and columns the key pixels. Queries are the rows of
/// `U_r √Σ_r`, keys the rows of `V_r √Σ_r`, so `Q Kᵀ` is the rank-`rank`
/// reconstruction and compatibilities are that reconstruction over
/// `sqrt(rank)`. Missing rank is padded with zero channels.
pub fn gen_lowrank_qk(
    source: &FieldImage,
    rank: usize,
    query_shape: Shape,
    key_shape: Shape,
) -> Result<LowRankQk> {
    if source.depth() != 1 {
        return Err(ScramError::InvalidShape("source raster must be single-channel".into()));
    }
    if source.height() != query_shape.len() || source.width() != key_shape.len() {
        return Err(ScramError::InvalidShape(format!(
            "source is {}x{} but layouts need {}x{}",
            source.height(),
            source.width(),
            query_shape.len(),
            key_shape.len()
        )));
    }
    if rank == 0 || rank > source.height().min(source.width()) {
        return Err(ScramError::InvalidConfig(format!(
            "rank {rank} must be in 1..={}",
            source.height().min(source.width())
        )));
    }
    let (rows, cols) = (source.height(), source.width());
    let m = DMatrix::<f64>::from_fn(rows, cols, |r, c| f64::from(source.data()[r * cols + c]));
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sv = &svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let tol = sv.max() * rows.max(cols) as f64 * f64::EPSILON;
    let kept: Vec<usize> = order.into_iter().take(rank).filter(|&t| sv[t] > tol).collect();
    let effective_rank = kept.len();

    let build = |len: usize, shape: Shape, entry: &dyn Fn(usize, usize) -> f64| {
        let mut data = vec![0.0f32; len * rank];
        for p in 0..len {
            for (c, &t) in kept.iter().enumerate() {
                data[p * rank + c] = (entry(p, t) * sv[t].sqrt()) as f32;
            }
        }
        FieldImage::new(shape.height, shape.width, rank, data)
    };
    let queries = build(rows, query_shape, &|p, t| u[(p, t)])?;
    let keys = build(cols, key_shape, &|p, t| v_t[(t, p)])?;
    Ok(LowRankQk {
        queries,
        keys,
        effective_rank,
        rank_deficient: effective_rank < rank,
    })
}

/// The coherent low-rank family: `coherent_source` reduced to rank `rank`
/// for a square self-attention layout, with uniform random values.
pub fn coherent_lowrank_family(
    shape: Shape,
    rank: usize,
    value_depth: usize,
    seed: u64,
) -> Result<(FieldImage, FieldImage, FieldImage)> {
    let source = coherent_source(shape, COHERENT_AMPLITUDE, COHERENT_WIDTH, seed)?;
    let lr = gen_lowrank_qk(&source, rank, shape, shape)?;
    let v = uniform_field(shape.height, shape.width, value_depth, seed ^ 0x5EED);
    Ok((lr.queries, lr.keys, v))
}

/// Peak source value of the coherent family before truncation.
pub const COHERENT_AMPLITUDE: f64 = 48.0;
/// Bump standard deviation of the coherent family, in pixels.
pub const COHERENT_WIDTH: f64 = 3.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruction_error(source: &FieldImage, lr: &LowRankQk) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..lr.queries.len() {
            for j in 0..lr.keys.len() {
                let s: f64 = lr.queries.vector(i).iter().zip(lr.keys.vector(j))
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                let want = f64::from(source.data()[i * lr.keys.len() + j]);
                worst = worst.max((s - want).abs());
            }
        }
        worst
    }

    #[test]
    fn rank_one_outer_product_is_exact() {
        let a: Vec<f32> = (0..6).map(|i| 0.5 + i as f32 * 0.25).collect();
        let b: Vec<f32> = (0..8).map(|j| 1.0 - j as f32 * 0.1).collect();
        let source = FieldImage::from_fn(6, 8, 1, |i, j, _| a[i] * b[j]).unwrap();
        let lr = gen_lowrank_qk(&source, 1, Shape::new(2, 3), Shape::new(2, 4)).unwrap();
        assert!(reconstruction_error(&source, &lr) <= 1e-5);
        assert!(!lr.rank_deficient);
    }

    #[test]
    fn full_rank_reconstructs() {
        let source = uniform_field(6, 6, 1, 3);
        let lr = gen_lowrank_qk(&source, 6, Shape::new(2, 3), Shape::new(3, 2)).unwrap();
        assert!(reconstruction_error(&source, &lr) <= 1e-4);
    }

    #[test]
    fn rank_deficiency_pads_with_zeros() {
        let source = FieldImage::from_fn(4, 4, 1, |i, j, _| (i + 1) as f32 * (j + 2) as f32).unwrap();
        let lr = gen_lowrank_qk(&source, 3, Shape::new(2, 2), Shape::new(2, 2)).unwrap();
        assert!(lr.rank_deficient);
        assert_eq!(lr.effective_rank, 1);
        for i in 0..4 {
            assert_eq!(&lr.queries.vector(i)[1..], &[0.0, 0.0]);
        }
        assert!(reconstruction_error(&source, &lr) <= 1e-4);
    }

    #[test]
    fn line_layout_gives_128_queries() {
        let source = coherent_source(Shape::new(128, 1), 4.0, 6.0, 1).unwrap();
        let lr = gen_lowrank_qk(&source, 4, Shape::new(128, 1), Shape::new(128, 1)).unwrap();
        assert_eq!(lr.queries.len(), 128);
        assert_eq!(lr.keys.len(), 128);
        assert_eq!(lr.queries.depth(), 4);
        let w = crate::attention::full_attention_weights(&lr.queries, &lr.keys, false).unwrap();
        assert_eq!((w.queries, w.keys), (128, 128));
    }

    #[test]
    fn blobs_basics() {
        let s = Shape::new(9, 11);
        let empty = gen_blobs(s, 2, &[]).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
        let c = PixelIndex::new(3, 7);
        let one = gen_blobs(s, 1, &[Blob { center: c, amplitude: 2.0, width: 1.5 }]).unwrap();
        let argmax = (0..s.len())
            .max_by(|&a, &b| one.vector(a)[0].total_cmp(&one.vector(b)[0]))
            .unwrap();
        assert_eq!(s.pixel(argmax), c);
    }

    #[test]
    fn random_blobs_are_separated() {
        let blobs = random_blobs(Shape::new(32, 32), 3, 1.0, 2.0, 8, 3, 5).unwrap();
        assert_eq!(blobs.len(), 3);
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(blobs[a].center.chebyshev(blobs[b].center) > 8);
            }
        }
    }
}
