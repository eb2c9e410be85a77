mod common;

use avgzsl::evalkit::{
    default_grid, harmonic_mean, pairwise_distances, search_calibration, DistanceTable, GzslTask,
};
use avgzsl::nn::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn brute_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// Class ids `0..k`, the first `seen` of them seen.
fn table_for(theta_o: &Matrix<f64>, theta_w: &Matrix<f64>, seen: usize) -> DistanceTable {
    let k = theta_w.rows();
    pairwise_distances(theta_o, theta_w, (0..k).collect(), (0..k).map(|j| j < seen).collect()).unwrap()
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.iter().map(|x| x / norm).collect());
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    Matrix::from_rows(&rows)
}

#[test]
fn published_harmonic_means() {
    for (method, dataset, s, u, hm) in common::PUBLISHED_RESULTS {
        let got = harmonic_mean(s, u);
        assert!((got - hm).abs() <= common::PUBLISHED_TOL, "{method} {dataset}: {got} vs {hm}");
    }
}

#[test]
fn distances_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let o = random(5, 64, &mut rng);
    let w = random(4, 64, &mut rng);
    let t = table_for(&o, &w, 2);
    for i in 0..5 {
        for j in 0..4 {
            assert!((t.distances.row(i)[j] - brute_distance(o.row(i), w.row(j))).abs() < 1e-6);
        }
    }
    let same = table_for(&w, &w, 2);
    for j in 0..4 {
        assert_eq!(same.distances.row(j)[j], 0.0);
    }
}

#[test]
fn classify_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let o = random(20, 8, &mut rng);
    let w = random(6, 8, &mut rng);
    let t = table_for(&o, &w, 3);
    let candidates = [1, 3, 4];
    let got = t.classify(&candidates).unwrap();
    for i in 0..20 {
        let mut best = (f64::INFINITY, usize::MAX);
        for &c in &candidates {
            let d = brute_distance(o.row(i), w.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        assert_eq!(got[i], best.1);
    }
    assert_eq!(t.classify_calibrated(0.0), t.classify(&[0, 1, 2, 3, 4, 5]).unwrap());
}

#[test]
fn flip_points_equal_distance_gaps() {
    // classes 0,1 seen; 2,3 unseen
    let rows = [[0.2, 0.9, 1.0, 1.7], [1.5, 0.4, 0.45, 2.0], [0.1, 3.0, 2.6, 1.2]];
    let t = DistanceTable {
        distances: Matrix::from_rows(&rows),
        classes: vec![0, 1, 2, 3],
        seen: vec![true, true, false, false],
    };
    // best seen minus best unseen, by hand
    let gaps = [1.0 - 0.2, 0.45 - 0.4, 1.2 - 0.1];
    for (i, gap) in gaps.iter().enumerate() {
        let below = t.classify_calibrated(gap - 1e-9)[i];
        let above = t.classify_calibrated(gap + 1e-9)[i];
        assert!(below < 2, "sample {i} flipped early");
        assert!(above >= 2, "sample {i} did not flip");
    }
}

#[test]
fn acc_zsl_is_at_least_acc_u_at_gamma_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let o = random(30, 6, &mut rng);
        let w = random(5, 6, &mut rng);
        let labels: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let task = GzslTask::new(table_for(&o, &w, 3), labels).unwrap();
        let r = task.report(0.0).unwrap();
        assert!(r.acc_zsl >= r.acc_u, "{r:?}");
    }
}

#[test]
fn identical_class_embeddings_collapse_to_lowest_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let o = random(12, 4, &mut rng);
    let w = Matrix::from_rows(&[[0.5, 0.5, 0.5, 0.5]; 4]);
    let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
    let task = GzslTask::new(table_for(&o, &w, 2), labels).unwrap();
    let r = task.report(0.0).unwrap();
    // everything goes to class 0: seen classes {0: 1.0, 1: 0.0}, unseen all wrong
    assert_eq!((r.acc_s, r.acc_u, r.hm), (0.5, 0.0, 0.0));
    // restricted to unseen, everything goes to class 2
    assert_eq!(r.acc_zsl, 0.5);
}

/// Scalar reimplementation of the whole chain: distances, calibrated argmin,
/// per-class means, HM and restricted ZSL accuracy.
fn scalar_metrics(o: &[Vec<f64>], w: &[Vec<f64>], labels: &[usize], seen: usize, gamma: f64) -> [f64; 4] {
    let k = w.len();
    let predict = |x: &[f64], allowed: &dyn Fn(usize) -> bool, gamma: f64| {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            if !allowed(j) {
                continue;
            }
            let d = brute_distance(x, &w[j]) + if j < seen { gamma } else { 0.0 };
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    };
    let mut hit = vec![0.0; k];
    let mut zsl_hit = vec![0.0; k];
    let mut count = vec![0.0; k];
    for (x, &y) in o.iter().zip(labels) {
        count[y] += 1.0;
        if predict(x, &|_| true, gamma) == y {
            hit[y] += 1.0;
        }
        if y >= seen && predict(x, &|j| j >= seen, 0.0) == y {
            zsl_hit[y] += 1.0;
        }
    }
    let mean = |range: std::ops::Range<usize>, h: &[f64]| {
        let present: Vec<usize> = range.filter(|&c| count[c] > 0.0).collect();
        present.iter().map(|&c| h[c] / count[c]).sum::<f64>() / present.len() as f64
    };
    let s = mean(0..seen, &hit);
    let u = mean(seen..k, &hit);
    let hm = if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) };
    [s, u, hm, mean(seen..k, &zsl_hit)]
}

#[test]
fn report_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(5, 4, &mut rng);
    let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..5)).collect();
    // samples near their class with noise so accuracies are non-trivial
    let o_rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| w.row(y).iter().map(|x| x + rng.random_range(-0.8..0.8)).collect())
        .collect();
    let o = Matrix::from_rows(&o_rows);
    let w_rows: Vec<Vec<f64>> = w.row_iter().map(<[f64]>::to_vec).collect();
    let task = GzslTask::new(table_for(&o, &w, 3), labels.clone()).unwrap();
    for gamma in [0.0, 0.07, 0.35, 1.4] {
        let r = task.report(gamma).unwrap();
        let want = scalar_metrics(&o_rows, &w_rows, &labels, 3, gamma);
        assert_eq!([r.acc_s, r.acc_u, r.hm, r.acc_zsl], want, "gamma {gamma}");
        assert!((r.hm - harmonic_mean(r.acc_s, r.acc_u)).abs() <= 1e-12);
    }
}

#[test]
fn search_matches_naive_loop_and_finds_positive_gamma() {
    // every unseen sample is slightly closer to a seen class at gamma 0
    let rows = [
        [0.0, 2.0, 2.5, 2.5],
        [2.0, 0.0, 2.5, 2.5],
        [0.9, 2.0, 1.0, 2.5],
        [2.0, 0.8, 2.5, 1.0],
    ];
    let t = DistanceTable {
        distances: Matrix::from_rows(&rows),
        classes: vec![0, 1, 2, 3],
        seen: vec![true, true, false, false],
    };
    let task = GzslTask::new(t, vec![0, 1, 2, 3]).unwrap();
    assert_eq!(task.report(0.0).unwrap().hm, 0.0);
    let grid = default_grid();
    let (gamma, hm) = search_calibration(&task, &grid).unwrap();
    assert!(gamma > 0.0 && hm > 0.0);

    let mut naive = (grid[0], task.report(grid[0]).unwrap().hm);
    for &g in &grid[1..] {
        let h = task.report(g).unwrap().hm;
        if h > naive.1 {
            naive = (g, h);
        }
    }
    assert_eq!((gamma, hm), naive);
    assert_eq!(search_calibration(&task, &[0.0]).unwrap().0, 0.0);
}

proptest! {
    #[test]
    fn flips_to_unseen_are_monotone_in_gamma(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = random(10, 5, &mut rng);
        let w = random(6, 5, &mut rng);
        let t = table_for(&o, &w, 3);
        let mut flipped = vec![false; 10];
        for g in default_grid() {
            let preds = t.classify_calibrated(g);
            for (i, &p) in preds.iter().enumerate() {
                let unseen = p >= 3;
                prop_assert!(!(flipped[i] && !unseen), "sample {} flipped back at {}", i, g);
                flipped[i] |= unseen;
            }
        }
    }

    #[test]
    fn classify_is_invariant_to_shift_and_rotation(seed in 0u64..200, shift in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = random(12, 6, &mut rng);
        let w = random(5, 6, &mut rng);
        let t = table_for(&o, &w, 2);
        let base = t.classify(&[0, 1, 2, 3, 4]).unwrap();

        let mut shifted = t.clone();
        shifted.distances = t.distances.map(|d| d + shift);
        prop_assert_eq!(shifted.classify(&[0, 1, 2, 3, 4]).unwrap(), base.clone());

        let q = random_orthogonal(6, &mut rng);
        let rotated = table_for(&o.matmul(&q).unwrap(), &w.matmul(&q).unwrap(), 2);
        prop_assert_eq!(rotated.classify(&[0, 1, 2, 3, 4]).unwrap(), base);
    }
}
