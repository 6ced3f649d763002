// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::fs;
use std::path::Path;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlprobe_core::datamodel::{layer_file, read_dataset, write_dataset, MANIFEST_FILE};
use xlprobe_core::{ActivationDataset, Split};

fn random_dataset(seed: u64, n_lang: usize, layers: usize, n: usize, d: usize) -> ActivationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<(f64, Split)> = (0..n)
        .map(|_| (rng.random::<f64>(), if rng.random_bool(0.5) { Split::Train } else { Split::Test }))
        .collect();
    let values: Vec<f32> = (0..n_lang * layers * n * d).map(|_| rng.random_range(-1e3..1e3)).collect();
    dataset_from_fn(langs(n_lang), layers, d, &labels, move |li, l, r, c| {
        values[((li * layers + l) * n + r) * d + c]
    })
}

fn dir_bytes(root: &Path, ds: &ActivationDataset) -> Vec<Vec<u8>> {
    let mut out = vec![fs::read(root.join(MANIFEST_FILE)).unwrap()];
    for lang in ds.languages() {
        for l in 0..ds.num_layers() {
            out.push(fs::read(layer_file(root, lang, l)).unwrap());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn write_read_is_bit_identical(seed in any::<u64>(), n_lang in 1usize..4, layers in 1usize..4,
                                   n in 0usize..12, d in 1usize..6) {
        let ds = random_dataset(seed, n_lang, layers, n, d);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&ds, a.path()).unwrap();
        let back = read_dataset(a.path()).unwrap();
        prop_assert_eq!(back.manifest(), ds.manifest());
        for li in 0..n_lang {
            for l in 0..layers {
                let x: Vec<u32> = ds.matrix(li, l).as_slice().iter().map(|v| v.to_bits()).collect();
                let y: Vec<u32> = back.matrix(li, l).as_slice().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(x, y);
            }
        }
        write_dataset(&back, b.path()).unwrap();
        prop_assert_eq!(dir_bytes(a.path(), &ds), dir_bytes(b.path(), &ds));
    }
}

#[test]
fn slices_partition_and_reconstruct_the_matrix() {
    let ds = random_dataset(3, 2, 3, 15, 4);
    let m = ds.manifest();
    for (li, lang) in ds.languages().iter().enumerate() {
        for l in 0..3 {
            let train = ds.slice(lang, l, Split::Train).unwrap();
            let test = ds.slice(lang, l, Split::Test).unwrap();
            assert_eq!(train.x.nrows(), m.split_indices(Split::Train).len());
            assert_eq!(test.x.nrows(), m.split_indices(Split::Test).len());
            let (mut ti, mut si) = (0, 0);
            for (row, p) in m.problems.iter().enumerate() {
                let (src, i) = match p.split {
                    Split::Train => (&train, &mut ti),
                    Split::Test => (&test, &mut si),
                };
                assert_eq!(src.ids[*i], p.id);
                assert_eq!(src.y[*i], p.difficulty);
                for c in 0..4 {
                    assert_eq!(src.x[(*i, c)], f64::from(ds.matrix(li, l).row(row)[c]));
                }
                *i += 1;
            }
        }
    }
}

#[test]
fn concurrent_readers_share_a_dataset() {
    let ds = std::sync::Arc::new(random_dataset(4, 3, 2, 10, 3));
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let ds = ds.clone();
            std::thread::spawn(move || ds.slice(&ds.languages()[t % 3], t % 2, Split::Train).unwrap().x.nrows())
        })
        .collect();
    let rows: Vec<usize> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(rows.iter().all(|&r| r == rows[0]));
}
