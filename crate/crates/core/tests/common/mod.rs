// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xlprobe_core::datamodel::{ActivationMatrix, FORMAT_VERSION};
use xlprobe_core::engine::PerfCube;
use xlprobe_core::{ActivationDataset, Manifest, ProblemRecord, Split};

pub fn langs(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

pub fn manifest(languages: Vec<String>, num_layers: usize, d_model: usize, labels: &[(f64, Split)]) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        model_name: "test".into(),
        d_model,
        num_layers,
        languages,
        problems: labels
            .iter()
            .enumerate()
            .map(|(i, &(difficulty, split))| ProblemRecord {
                id: format!("q{i}"),
                difficulty,
                split,
            })
            .collect(),
        provenance: BTreeMap::new(),
    }
}

/// Dataset whose (language, layer) matrices come from `f(lang, layer, row, col)`.
pub fn dataset_from_fn(
    languages: Vec<String>,
    num_layers: usize,
    d_model: usize,
    labels: &[(f64, Split)],
    f: impl Fn(usize, usize, usize, usize) -> f32,
) -> ActivationDataset {
    let n = labels.len();
    let mut mats = Vec::new();
    for li in 0..languages.len() {
        for layer in 0..num_layers {
            let data = (0..n * d_model).map(|k| f(li, layer, k / d_model, k % d_model)).collect();
            mats.push(ActivationMatrix::new(n, d_model, data).unwrap());
        }
    }
    ActivationDataset::new(manifest(languages, num_layers, d_model, labels), mats).unwrap()
}

/// Random labels: `n_train` train problems followed by `n_test` test problems.
pub fn random_labels(rng: &mut ChaCha8Rng, n_train: usize, n_test: usize) -> Vec<(f64, Split)> {
    (0..n_train + n_test)
        .map(|i| (rng.random::<f64>(), if i < n_train { Split::Train } else { Split::Test }))
        .collect()
}

/// Applies the problem permutation `perm` (new row i = old row perm[i]) to
/// the manifest and every matrix.
pub fn permute_problems(ds: &ActivationDataset, perm: &[usize]) -> ActivationDataset {
    let (mut m, mats) = ds.clone().into_parts();
    m.problems = perm.iter().map(|&i| m.problems[i].clone()).collect();
    let mats = mats
        .iter()
        .map(|mat| {
            let data = perm.iter().flat_map(|&i| mat.row(i).iter().copied()).collect();
            ActivationMatrix::new(mat.rows(), mat.cols(), data).unwrap()
        })
        .collect();
    ActivationDataset::new(m, mats).unwrap()
}

pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

/// Random cube with up to `max_langs` languages and `max_layers` layers.
/// Half the cubes draw from a coarse grid of values so that ties occur.
pub fn random_cube(rng: &mut ChaCha8Rng, max_langs: usize, max_layers: usize) -> PerfCube {
    let n = rng.random_range(2..=max_langs);
    let layers = rng.random_range(1..=max_layers);
    let coarse = rng.random_bool(0.5);
    let values = (0..n * n * layers)
        .map(|_| {
            if coarse {
                f64::from(rng.random_range(0..=8u8)) / 4.0 - 1.0
            } else {
                rng.random_range(-1.0..=1.0)
            }
        })
        .collect();
    PerfCube::new(langs(n), layers, values).unwrap()
}
