use scram::attention::{full_attention_weights, top_k_exact, top_k_mode_exact};
use scram::forward::{scram_run, SparseIndexSets};
use scram::harness::{run_method, Method};
use scram::mc::{snis_estimate, ModeSet, SnisConfig};
use scram::synth::{coherent_source, gen_blobs, gen_lowrank_qk, random_blobs, uniform_field};
use scram::{full_attention, with_threads, FieldImage, PatchMatchConfig, PixelIndex, ScramConfig, Shape, ValidityPolicy};

fn constant_queries(shape: Shape) -> FieldImage {
    FieldImage::from_fn(shape.height, shape.width, 1, |_, _, _| 1.0).unwrap()
}

#[test]
fn exact_mode_selection_finds_blob_centres() {
    let shape = Shape::new(24, 24);
    for seed in 0..8 {
        let blobs = random_blobs(shape, 3, 1.0, 1.5, 9, 3, seed).unwrap();
        let k = gen_blobs(shape, 1, &blobs).unwrap();
        let modes = top_k_mode_exact(&constant_queries(shape), &k, 3, 4).unwrap();
        for m in &modes[0] {
            assert!(blobs.iter().any(|b| b.center.chebyshev(*m) <= 1), "seed {seed}: {m:?}");
        }
    }
}

#[test]
fn mode_windows_touch_every_blob() {
    let shape = Shape::new(32, 32);
    let blobs = random_blobs(shape, 3, 1.0, 1.5, 9, 3, 4).unwrap();
    let k = gen_blobs(shape, 1, &blobs).unwrap();
    let q = constant_queries(shape);
    let v = uniform_field(32, 32, 1, 1);
    let cfg = ScramConfig {
        kappa: 3,
        radius: 1,
        policy: ValidityPolicy::ModeSeparated { separation: 4 },
        patchmatch: PatchMatchConfig::with_seed(4),
        causal: false,
    };
    let run = scram_run(&q, &k, &v, &cfg).unwrap();
    let i = PixelIndex::new(4, 5).linear(32);
    for b in &blobs {
        assert!(run.sets.pixels(i).any(|p| p == b.center), "blob at {:?} not attended", b.center);
    }
    // With wider blobs the pixels around the strongest peak outrank the
    // other peaks, so plain top-kappa clusters on one blob.
    let wide: Vec<_> = blobs.iter().map(|b| scram::synth::Blob { width: 3.0, ..*b }).collect();
    let k_wide = gen_blobs(shape, 1, &wide).unwrap();
    for p in &top_k_exact(&q, &k_wide, 3).unwrap()[i] {
        assert!(p.chebyshev(wide[0].center) <= 1);
    }
}

/// A 128 x 1 line of queries and keys from a rank-4 reconstruction. The
/// sparse support of every row must coincide with the exact top-kappa keys
/// of the dense map when the matches are exact and no window is added.
#[test]
fn sparse_line_support_matches_dense_top_k() {
    let line = Shape::new(128, 1);
    let source = coherent_source(Shape::new(16, 8), 24.0, 3.0, 2).unwrap();
    let lr = gen_lowrank_qk(&source, 4, line, line).unwrap();
    let (q, k) = (lr.queries, lr.keys);
    let dense = full_attention_weights(&q, &k, false).unwrap();
    let exact = top_k_exact(&q, &k, 3).unwrap();
    let sets = SparseIndexSets::from_pixels(line, &exact).unwrap();
    for i in 0..q.len() {
        let row = dense.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = order[..3].to_vec();
        top.sort_unstable();
        assert_eq!(sets.row(i), top.as_slice(), "query {i}");
        let pixels = scram::io::heatmap_pixels(row).unwrap();
        assert!(top.iter().any(|&j| pixels[j] == 255));
    }
}

#[test]
fn method_outputs_do_not_depend_on_thread_count() {
    let q = uniform_field(12, 10, 3, 1);
    let k = uniform_field(12, 10, 3, 2);
    let v = uniform_field(12, 10, 2, 3);
    let cfg = ScramConfig {
        kappa: 2,
        radius: 1,
        patchmatch: PatchMatchConfig::with_seed(9),
        ..ScramConfig::default()
    };
    for method in [Method::Full, Method::Scram, Method::Snis, Method::Mh] {
        let one = with_threads(1, || run_method(method, &q, &k, &v, &cfg)).unwrap();
        let many = with_threads(6, || run_method(method, &q, &k, &v, &cfg)).unwrap();
        let bits = |f: &FieldImage| f.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&one.values), bits(&many.values), "{}", method.name());
    }
}

#[test]
fn snis_error_shrinks_as_samples_double() {
    let q = uniform_field(8, 8, 4, 5);
    let k = uniform_field(8, 8, 4, 6);
    let v = uniform_field(8, 8, 1, 7);
    let n = 64;
    let exact = full_attention(&q, &k, &v, false).unwrap();
    let modes = ModeSet::new(top_k_exact(&q, &k, 2).unwrap());
    let median_error = |samples: usize| {
        let mut errs: Vec<f64> = Vec::new();
        for seed in 0..16 {
            let cfg = SnisConfig { samples, alpha: 0.5, phi: 2.0, seed };
            let (out, _) = snis_estimate(&q, &k, &v, &modes, &cfg).unwrap();
            errs.extend(
                out.values
                    .data()
                    .iter()
                    .zip(exact.values.data())
                    .map(|(a, b)| f64::from((a - b).abs())),
            );
        }
        errs.sort_by(f64::total_cmp);
        errs[errs.len() / 2]
    };
    let errors: Vec<f64> = [n / 4, n / 2, n, 2 * n].into_iter().map(median_error).collect();
    for w in errors.windows(2) {
        assert!(w[1] < w[0], "{errors:?}");
    }
}
