mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;

use uniseg::domain::{LabelSpace, Mask};
use uniseg::losses::{
    cross_dataset_loss, direct_ser_loss, entropy, similarity_entropy, similarity_scores, softmax, supervised_loss,
    within_dataset_loss,
};
use uniseg::metrics::ConfusionMatrix;
use uniseg::model::infer;
use uniseg::prototypes::{
    compute_centroids, ema_update, fit_pca, fresh_centroids, kmeans, parse_prototypes, read_prototypes,
    write_prototypes, PrototypeTable,
};

#[test]
fn miou_matches_pixel_tally() {
    let mut r = rng(7);
    let classes = 5;
    for _ in 0..50 {
        let pairs: Vec<(Mask, Mask)> = (0..3)
            .map(|_| {
                let pred = random_mask(&mut r, 16, 16, classes, 0);
                let pred = Mask::new(16, 16, pred.data.iter().map(|&v| v % classes as u8).collect()).unwrap();
                (pred, random_mask(&mut r, 16, 16, classes, 255))
            })
            .collect();
        let mut cm = ConfusionMatrix::new(classes);
        for (p, g) in &pairs {
            cm.accumulate(p, g, 255).unwrap();
        }
        let tally = brute_confusion(classes, &pairs, 255);
        assert_eq!(cm.counts(), tally.as_slice());
        for (a, b) in cm.iou_per_class().iter().zip(brute_iou(classes, &tally)) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                (a, b) => assert_eq!(*a, b),
            }
        }
    }
}

#[test]
fn similarity_and_entropies_match_brute_force() {
    let mut r = rng(11);
    for case in 0..10 {
        let (h, w, d) = (r.gen_range(2..7), r.gen_range(2..7), 4);
        let k = 1 + case % 3;
        let e1 = random_tensor(&mut r, [2, d, h, w], 1.0);
        let e2 = random_tensor(&mut r, [3, d, h, w], 1.0);
        let t1 = random_table(&mut r, "a", 5, k, d);
        let t2 = random_table(&mut r, "b", 4, k, d);
        let s = similarity_scores(&e1, &t2).unwrap();
        let mut h12 = 0.0;
        for n in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let v = brute_similarity(&e1, n, y, x, &t2);
                    for (l, &vl) in v.iter().enumerate() {
                        assert!((s.at(n, l, y, x) - vl).abs() < 1e-6);
                    }
                    h12 += brute_softmax_entropy(&v);
                }
            }
        }
        h12 /= (2 * h * w) as f64;
        let mut h11 = 0.0;
        for n in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    h11 += brute_softmax_entropy(&brute_similarity(&e1, n, y, x, &t1));
                }
            }
        }
        h11 /= (2 * h * w) as f64;
        let mean_h = |e: &uniseg::Tensor4, t: &PrototypeTable| {
            let (b, _, h, w) = (e.batch(), 0, e.hw().0, e.hw().1);
            let mut s = 0.0;
            for n in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        s += brute_softmax_entropy(&brute_similarity(e, n, y, x, t));
                    }
                }
            }
            s / (b * h * w) as f64
        };
        assert!((similarity_entropy(&e1, &t2, false).unwrap().0 - h12).abs() < 1e-6);
        let within = within_dataset_loss(&e1, &e2, &t1, &t2).unwrap();
        assert!((within - (h11 + mean_h(&e2, &t2))).abs() < 1e-6);
        let cross = cross_dataset_loss(&e1, &e2, &t1, &t2).unwrap();
        assert!((cross - (h12 + mean_h(&e2, &t1))).abs() < 1e-6);

        let logits = random_tensor(&mut r, [2, 5, h, w], 2.0);
        let mut ser = 0.0;
        for n in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let v: Vec<f64> = (0..5).map(|c| logits.at(n, c, y, x)).collect();
                    ser += brute_softmax_entropy(&v);
                }
            }
        }
        assert!((direct_ser_loss(&logits) - ser / (2 * h * w) as f64).abs() < 1e-6);
    }
}

#[test]
fn supervised_loss_matches_brute_force() {
    let mut r = rng(3);
    let logits = random_tensor(&mut r, [2, 4, 5, 6], 2.0);
    let masks: Vec<Mask> = (0..2).map(|_| random_mask(&mut r, 5, 6, 4, 255)).collect();
    let (mut sum, mut n) = (0.0, 0);
    for (b, m) in masks.iter().enumerate() {
        for y in 0..5 {
            for x in 0..6 {
                let g = m.get(y, x);
                if g == 255 {
                    continue;
                }
                let v: Vec<f64> = (0..4).map(|c| logits.at(b, c, y, x)).collect();
                let z: f64 = v.iter().map(|t| t.exp()).sum();
                sum -= (v[g as usize].exp() / z).ln();
                n += 1;
            }
        }
    }
    let l = supervised_loss(&logits, &masks, 255).unwrap();
    assert_eq!(l.count, n);
    assert!((l.value - sum / n as f64).abs() < 1e-9);
}

#[test]
fn pca_matches_jacobi_oracle() {
    let mut r = rng(5);
    let (n, c, d) = (60, 6, 3);
    // anisotropic cloud so eigenvalues are well separated
    let scales = [3.0, 2.0, 1.2, 0.6, 0.3, 0.1];
    let x: Vec<f64> = (0..n)
        .flat_map(|_| normal_vec(&mut r, c, 1.0).into_iter().zip(scales).map(|(v, s)| v * s).collect::<Vec<_>>())
        .collect();
    let p = fit_pca(&x, n, c, d).unwrap();
    let mean: Vec<f64> = (0..c).map(|j| (0..n).map(|i| x[i * c + j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..n {
        for a in 0..c {
            for b in 0..c {
                cov[a * c + b] += (x[i * c + a] - mean[a]) * (x[i * c + b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(&cov, c);
    for j in 0..d {
        assert!((p.explained_variance[j] - vals[j]).abs() < 1e-9);
        let col: Vec<f64> = (0..c).map(|i| p.components[i * d + j]).collect();
        let dot: f64 = col.iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "direction {j}: |dot| = {}", dot.abs());
        let pivot = (0..c).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap();
        assert!(col[pivot] > 0.0);
    }
}

#[test]
fn kmeans_single_cluster_is_the_mean() {
    let mut r = rng(9);
    let pts = normal_vec(&mut r, 40 * 3, 2.0);
    let fit = kmeans(&pts, 3, 1, 1, 3, 50).unwrap();
    for j in 0..3 {
        let m = (0..40).map(|i| pts[i * 3 + j]).sum::<f64>() / 40.0;
        assert!((fit.centroids[j] - m).abs() < 1e-9);
    }
}

#[test]
fn kmeans_inertia_never_increases() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let pts = normal_vec(&mut r, 80 * 2, 1.0);
        let fit = kmeans(&pts, 2, 4, seed, 1, 100).unwrap();
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.history);
        }
    }
}

#[test]
fn kmeans_restarts_reach_exhaustive_optimum() {
    for seed in 0..10 {
        let mut r = rng(50 + seed);
        let pts = normal_vec(&mut r, 12 * 2, 1.0);
        for k in [2, 3] {
            let fit = kmeans(&pts, 2, k, seed, 20, 100).unwrap();
            let opt = exhaustive_inertia(&pts, 2, k);
            assert!(fit.inertia <= opt + 1e-9, "seed {seed} k {k}: {} vs {opt}", fit.inertia);
        }
    }
}

#[test]
fn centroids_and_ema_against_hand_values() {
    let ls = LabelSpace::from_names(&["a", "b"]).unwrap();
    let pts = [2.0, 0.0, 4.0, 0.0, 0.0, 3.0];
    let (t, rep) = compute_centroids(&pts, &[0, 0, 1], 2, &ls, "x").unwrap();
    assert!(rep.empty_classes.is_empty());
    assert_eq!(t.vector(0, 0), &[1.0, 0.0]);
    assert_eq!(t.vector(1, 0), &[0.0, 1.0]);
    let fresh = fresh_centroids(&[0.0, 5.0, 1.0, 0.0], &t).unwrap();
    let same = ema_update(&t, &fresh, 1.0).unwrap();
    assert_eq!(same, t);
    let moved = ema_update(&t, &fresh, 0.5).unwrap();
    // label 0 already points at the fresh direction; label 1 too
    assert!((moved.vector(0, 0)[0] - 1.0).abs() < 1e-12);
    assert!((moved.vector(1, 0)[1] - 1.0).abs() < 1e-12);
}

#[test]
fn prototype_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(1);
    for k in [1, 3] {
        let t = random_table(&mut r, "dom", 4, k, 7);
        let p = dir.path().join(format!("t{k}.txt"));
        write_prototypes(&p, &t).unwrap();
        let back = read_prototypes(&p).unwrap();
        assert!(back.same_vectors(&t));
        assert_eq!(back.vectors(), t.vectors());
        assert_eq!(back.labels(), t.labels());
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(parse_prototypes(&text).unwrap().vectors(), t.vectors());
    }
}

#[test]
fn infer_is_pixelwise_argmax() {
    let mut r = rng(2);
    let logits = random_tensor(&mut r, [2, 4, 3, 5], 1.0);
    let masks = infer(&logits);
    for (n, m) in masks.iter().enumerate() {
        for y in 0..3 {
            for x in 0..5 {
                let best = (0..4).max_by(|&a, &b| logits.at(n, a, y, x).total_cmp(&logits.at(n, b, y, x)).then(b.cmp(&a))).unwrap();
                assert_eq!(m.get(y, x) as usize, best);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..8), c in -100.0f64..100.0) {
        let a = softmax(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_bounded(v in prop::collection::vec(-10.0f64..10.0, 1..10)) {
        let p = softmax(&v);
        let h = entropy(&p).unwrap();
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn normalization_is_idempotent(seed in 0u64..1000, k in 1usize..4) {
        let mut r = rng(seed);
        let t = random_table(&mut r, "p", 3, k, 5);
        let again = t.clone().normalized();
        for (a, b) in t.vectors().iter().zip(again.vectors()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for row in t.vectors().chunks(5) {
            prop_assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_error_shrinks_with_dimension(seed in 0u64..500) {
        let mut r = rng(seed);
        let (n, c) = (30, 5);
        let x = normal_vec(&mut r, n * c, 1.0);
        let mut prev = f64::INFINITY;
        for d in 1..=c {
            let p = fit_pca(&x, n, c, d).unwrap();
            let err: f64 = x.chunks(c).map(|row| {
                let back = p.reconstruct(&p.project(row));
                row.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            }).sum();
            prop_assert!(err <= prev + 1e-9);
            prev = err;
        }
        prop_assert!(prev < 1e-18 * n as f64 + 1e-12);
    }

    #[test]
    fn prototype_text_round_trip(seed in 0u64..1000, k in 1usize..4, d in 1usize..9) {
        let mut r = rng(seed);
        let t = random_table(&mut r, "dom", 3, k, d);
        let back = parse_prototypes(&uniseg::prototypes::format_prototypes(&t)).unwrap();
        prop_assert_eq!(back.vectors(), t.vectors());
    }
}

