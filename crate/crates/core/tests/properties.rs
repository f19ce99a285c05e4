use proptest::prelude::*;

use scram::attention::{full_attention, softmax_row};
use scram::forward::{expand_neighbourhood, sparse_attention_output};
use scram::synth::uniform_field;
use scram::{top_kappa, FieldImage, PatchMatchConfig, ValidityPolicy};

fn field(h: usize, w: usize, d: usize, seed: u64) -> FieldImage {
    uniform_field(h, w, d, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_ignores_row_shift(scores in proptest::collection::vec(-30.0f64..30.0, 1..40), c in -500.0f64..500.0) {
        let a = softmax_row(&scores).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let b = softmax_row(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    /// Appending a channel with q = 1 and k = const adds the same constant
    /// to every score of a row.
    #[test]
    fn attention_ignores_constant_score_offset(h in 1usize..6, w in 1usize..6, d in 1usize..4, seed in any::<u64>(), c in -5.0f32..5.0) {
        let q = field(h, w, d, seed);
        let k = field(h, w, d, seed ^ 1);
        let v = field(h, w, 2, seed ^ 2);
        let out = full_attention(&q, &k, &v, false).unwrap();
        let ext = |f: &FieldImage, extra: f32| {
            FieldImage::from_fn(h, w, d + 1, |y, x, ch| {
                if ch < d { f.at(scram::PixelIndex::new(y, x))[ch] } else { extra }
            })
            .unwrap()
        };
        // Scale the extra channel so the 1/sqrt(d) factor still yields the
        // same compatibility for the original channels.
        let s = ((d + 1) as f32 / d as f32).sqrt();
        let q2 = FieldImage::from_fn(h, w, d + 1, |y, x, ch| ext(&q, 1.0).at(scram::PixelIndex::new(y, x))[ch] * s).unwrap();
        let k2 = ext(&k, c);
        let out2 = full_attention(&q2, &k2, &v, false).unwrap();
        for (a, b) in out.values.data().iter().zip(out2.values.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_is_key_permutation_equivariant(h in 1usize..6, w in 1usize..6, d in 1usize..4, seed in any::<u64>(), rot in 0usize..36) {
        let q = field(h, w, d, seed);
        let k = field(h, w, d, seed ^ 1);
        let v = field(h, w, 3, seed ^ 2);
        let n = h * w;
        let perm = |f: &FieldImage| {
            let dd = f.depth();
            let mut data = Vec::with_capacity(f.data().len());
            for j in 0..n {
                data.extend_from_slice(f.vector((j * 7 + rot) % n));
            }
            let _ = dd;
            FieldImage::new(h, w, dd, data).unwrap()
        };
        prop_assume!(n == 1 || gcd(7, n) == 1);
        let a = full_attention(&q, &k, &v, false).unwrap();
        let b = full_attention(&q, &perm(&k), &perm(&v), false).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn sparse_rows_are_convex_combinations(h in 2usize..7, w in 2usize..7, seed in any::<u64>(), kappa in 1usize..3, b in 0usize..2, causal in any::<bool>()) {
        let q = field(h, w, 3, seed);
        let k = field(h, w, 3, seed ^ 1);
        let v = field(h, w, 1, seed ^ 2);
        let fields = top_kappa(&q, &k, kappa, ValidityPolicy::MaxNonDuplicate, &PatchMatchConfig::with_seed(seed), causal).unwrap();
        let sets = expand_neighbourhood(&fields, b, causal).unwrap();
        let out = sparse_attention_output(&q, &k, &v, &sets, causal).unwrap();
        for i in 0..q.len() {
            let row = sets.row(i);
            if row.is_empty() || out.degenerate[i] {
                prop_assert_eq!(out.values.vector(i)[0], 0.0);
                continue;
            }
            let lo = row.iter().map(|&j| v.vector(j)[0]).fold(f32::INFINITY, f32::min);
            let hi = row.iter().map(|&j| v.vector(j)[0]).fold(f32::NEG_INFINITY, f32::max);
            let o = out.values.vector(i)[0];
            prop_assert!(o >= lo - 1e-6 && o <= hi + 1e-6);
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}
