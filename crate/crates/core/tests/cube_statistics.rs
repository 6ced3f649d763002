// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aggregations over random cubes checked against straightforward scans.

mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlprobe_core::engine::*;

fn scan_argmax(profile: &[f64]) -> usize {
    let max = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    profile.iter().position(|&v| v == max).unwrap()
}

#[test]
fn matrices_match_exhaustive_scans() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..200 {
        let cube = random_cube(&mut rng, 5, 8);
        let n = cube.num_languages();
        let max = max_rho_matrix(&cube);
        let arg = argmax_layer_matrix(&cube);
        for a in 0..n {
            for b in 0..n {
                let p: Vec<f64> = (0..cube.num_layers()).map(|l| cube.get(a, b, l)).collect();
                let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(max[a][b], m);
                assert!(p.iter().all(|&v| max[a][b] >= v));
                assert_eq!(arg[a][b], scan_argmax(&p));
                assert!(arg[a][b] < cube.num_layers());
            }
        }
        let diag = diagonal_optimal_layers(&cube);
        for a in 0..n {
            assert_eq!(diag[a], arg[a][a]);
        }
    }
}

#[test]
fn heatmap_matches_direct_means() {
    let cube = PerfCube::from_fn(langs(3), 4, |a, b, l| ((a * 31 + b * 17 + l * 7) % 19) as f64 / 19.0).unwrap();
    let h = layerwise_transfer_heatmap(&cube).unwrap();
    for b in 0..3 {
        for l in 0..4 {
            let others: Vec<usize> = (0..3).filter(|&a| a != b).collect();
            let expected = (cube.get(others[0], b, l) + cube.get(others[1], b, l)) / 2.0;
            assert_eq!(h[b][l], expected);
        }
    }
}

#[test]
fn symmetric_layer_constant_cube_gives_identical_heatmap_rows() {
    let cube = PerfCube::from_fn(langs(4), 5, |_, _, l| 0.1 * l as f64).unwrap();
    let h = layerwise_transfer_heatmap(&cube).unwrap();
    assert!(h.iter().all(|row| row == &h[0]));
}

#[test]
fn transfer_optimal_layers_match_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..200 {
        let cube = random_cube(&mut rng, 6, 6);
        let n = cube.num_languages();
        let got = transfer_optimal_layers(&cube).unwrap();
        for a in 0..n {
            let mut hist = std::collections::BTreeMap::new();
            for b in (0..n).filter(|&b| b != a) {
                let p: Vec<f64> = (0..cube.num_layers()).map(|l| cube.get(a, b, l)).collect();
                *hist.entry(scan_argmax(&p)).or_insert(0) += 1;
            }
            let top = *hist.values().max().unwrap();
            let expected = *hist.iter().find(|(_, &c)| c == top).unwrap().0;
            assert_eq!(got[a], expected);
        }
    }
}

#[test]
fn relabeling_permutes_matrices_and_keeps_scalars() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..100 {
        let cube = random_cube(&mut rng, 6, 8);
        let n = cube.num_languages();
        let perm = shuffled(&mut rng, n);
        let names: Vec<String> = perm.iter().map(|&i| cube.languages()[i].clone()).collect();
        let relabeled =
            PerfCube::from_fn(names, cube.num_layers(), |a, b, l| cube.get(perm[a], perm[b], l)).unwrap();
        let r1 = summarize(&cube).unwrap();
        let r2 = summarize(&relabeled).unwrap();
        for a in 0..n {
            for b in 0..n {
                assert_eq!(r2.max_rho_matrix[a][b], r1.max_rho_matrix[perm[a]][perm[b]]);
                assert_eq!(r2.argmax_layer_matrix[a][b], r1.argmax_layer_matrix[perm[a]][perm[b]]);
            }
            assert_eq!(r2.diag_optimal_layers[a], r1.diag_optimal_layers[perm[a]]);
            assert_eq!(r2.transfer_optimal_layers[a], r1.transfer_optimal_layers[perm[a]]);
        }
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
        assert!(close(r1.diag_mean, r2.diag_mean));
        assert!(close(r1.diag_std, r2.diag_std));
        assert!(close(r1.offdiag_mean, r2.offdiag_mean));
        assert!(close(r1.offdiag_std, r2.offdiag_std));
        assert!(close(r1.mean_peak_layer_diag, r2.mean_peak_layer_diag));
        assert!(close(r1.mean_peak_layer_offdiag, r2.mean_peak_layer_offdiag));
        assert!(close(r1.transfer_drop, r2.transfer_drop));
        assert!(close(r1.in_language_drop, r2.in_language_drop));
        match (r1.p_value, r2.p_value) {
            (Some(p), Some(q)) => assert!(close(p, q)),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn summary_peak_layers_average_argmax_entries() {
    let cube = PerfCube::from_fn(langs(3), 4, |a, b, l| {
        let peak = if a == b { 3 } else { a + b - 1 };
        if l == peak { 0.9 } else { 0.1 }
    })
    .unwrap();
    let r = summarize(&cube).unwrap();
    assert_eq!(r.mean_peak_layer_diag, 3.0);
    // Off-diagonal peaks: (0,1)=0, (0,2)=1, (1,0)=0, (1,2)=2, (2,0)=1, (2,1)=2.
    assert_eq!(r.mean_peak_layer_offdiag, 1.0);
}
