// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation dataset container and its on-disk format.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.json
//! activations/<lang>/layer_<l>.bin
//! ```
//!
//! Each `.bin` file is a row-major, little-endian `f32` dump of a
//! `[num_problems x d_model]` matrix with no header or padding. Row `i` is the
//! final-prompt-token residual vector of `manifest.problems[i]`.
//!
//! Datasets are immutable once built or loaded and can be shared freely
//! across threads.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current manifest format version.
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ACTIVATIONS_DIR: &str = "activations";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("missing activation file for ({language:?}, {layer}): {path}")]
    MissingFile {
        language: String,
        layer: usize,
        path: PathBuf,
    },

    #[error("size mismatch for ({language:?}, {layer}): expected {expected} bytes, found {actual}")]
    SizeMismatch {
        language: String,
        layer: usize,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite activation for ({language:?}, {layer}) at row {row}, column {col}")]
    NonFinite {
        language: String,
        layer: usize,
        row: usize,
        col: usize,
    },

    #[error("shape mismatch for ({language:?}, {layer}): expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    Shape {
        language: String,
        layer: usize,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("unknown language {0:?}")]
    UnknownLanguage(String),

    #[error("layer {layer} out of range (num_layers = {num_layers})")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("malformed manifest.json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    /// Difficulty label in `[0, 1]`.
    pub difficulty: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_name: String,
    pub d_model: usize,
    pub num_layers: usize,
    pub languages: Vec<String>,
    /// Problem order here is the row order of every activation matrix.
    pub problems: Vec<ProblemRecord>,
    /// Free-form provenance (model, template, capture precision, RNG, ...).
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Language codes double as directory names, so they are restricted to
/// ASCII alphanumerics, `-` and `_`.
fn valid_language_code(code: &str) -> bool {
    !code.is_empty()
        && code
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl Manifest {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Manifest(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.d_model == 0 {
            return bad("d_model must be >= 1".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.languages.is_empty() {
            return bad("languages must be non-empty".into());
        }
        let mut seen = HashSet::new();
        for lang in &self.languages {
            if !valid_language_code(lang) {
                return bad(format!("invalid language code {lang:?}"));
            }
            if !seen.insert(lang.as_str()) {
                return bad(format!("duplicate language {lang:?}"));
            }
        }
        let mut ids = HashSet::new();
        for p in &self.problems {
            if !(0.0..=1.0).contains(&p.difficulty) {
                return bad(format!(
                    "problem {:?} has difficulty {} outside [0, 1]",
                    p.id, p.difficulty
                ));
            }
            if !ids.insert(p.id.as_str()) {
                return bad(format!("duplicate problem id {:?}", p.id));
            }
        }
        Ok(())
    }

    pub fn num_problems(&self) -> usize {
        self.problems.len()
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == code)
    }

    /// Manifest-order indices of the problems in `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.problems
            .iter()
            .enumerate()
            .filter(|(_, p)| p.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn difficulties(&self, rows: &[usize]) -> DVector<f64> {
        DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.problems[i].difficulty))
    }
}

/// Row-major `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Gathers `rows` (in the given order) into an `f64` matrix.
    pub fn gather(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.cols, |r, c| {
            f64::from(self.data[rows[r] * self.cols + c])
        })
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Activations for every (language, layer) pair plus the manifest that
/// describes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    manifest: Manifest,
    /// Language-major: index `lang * num_layers + layer`.
    matrices: Vec<ActivationMatrix>,
}

/// Rows of one (language, layer) restricted to a split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSlice {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub ids: Vec<String>,
}

impl ActivationDataset {
    /// Builds a dataset from language-major matrices, validating every
    /// invariant.
    pub fn new(manifest: Manifest, matrices: Vec<ActivationMatrix>) -> Result<Self, DataError> {
        let ds = Self { manifest, matrices };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let m = &self.manifest;
        m.validate()?;
        let expected = m.languages.len() * m.num_layers;
        if self.matrices.len() != expected {
            return Err(DataError::Manifest(format!(
                "expected {expected} activation matrices, found {}",
                self.matrices.len()
            )));
        }
        for (li, lang) in m.languages.iter().enumerate() {
            for layer in 0..m.num_layers {
                let mat = &self.matrices[li * m.num_layers + layer];
                if mat.rows != m.num_problems() || mat.cols != m.d_model {
                    return Err(DataError::Shape {
                        language: lang.clone(),
                        layer,
                        expected_rows: m.num_problems(),
                        expected_cols: m.d_model,
                        rows: mat.rows,
                        cols: mat.cols,
                    });
                }
                check_finite(mat, lang, layer)?;
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn languages(&self) -> &[String] {
        &self.manifest.languages
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers
    }

    pub fn matrix(&self, lang_idx: usize, layer: usize) -> &ActivationMatrix {
        &self.matrices[lang_idx * self.manifest.num_layers + layer]
    }

    pub fn into_parts(self) -> (Manifest, Vec<ActivationMatrix>) {
        (self.manifest, self.matrices)
    }

    /// Rows of `(language, layer)` whose split matches, in manifest order.
    pub fn slice(&self, language: &str, layer: usize, split: Split) -> Result<DataSlice, DataError> {
        let li = self
            .manifest
            .language_index(language)
            .ok_or_else(|| DataError::UnknownLanguage(language.to_string()))?;
        if layer >= self.manifest.num_layers {
            return Err(DataError::LayerOutOfRange {
                layer,
                num_layers: self.manifest.num_layers,
            });
        }
        let rows = self.manifest.split_indices(split);
        Ok(DataSlice {
            x: self.matrix(li, layer).gather(&rows),
            y: self.manifest.difficulties(&rows),
            ids: rows
                .iter()
                .map(|&i| self.manifest.problems[i].id.clone())
                .collect(),
        })
    }
}

fn check_finite(mat: &ActivationMatrix, lang: &str, layer: usize) -> Result<(), DataError> {
    match mat.data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(DataError::NonFinite {
            language: lang.to_string(),
            layer,
            row: pos / mat.cols,
            col: pos % mat.cols,
        }),
    }
}

pub fn layer_file(root: &Path, language: &str, layer: usize) -> PathBuf {
    root.join(ACTIVATIONS_DIR)
        .join(language)
        .join(format!("layer_{layer}.bin"))
}

/// Writes `dataset` under `path`. The dataset is re-validated first and
/// nothing is written if any invariant fails.
pub fn write_dataset(dataset: &ActivationDataset, path: &Path) -> Result<(), DataError> {
    dataset.validate()?;
    let m = &dataset.manifest;

    fs::create_dir_all(path).map_err(io_err(path))?;
    let manifest_path = path.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(m)?;
    json.push(b'\n');
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;

    for (li, lang) in m.languages.iter().enumerate() {
        let dir = path.join(ACTIVATIONS_DIR).join(lang);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for layer in 0..m.num_layers {
            let file = layer_file(path, lang, layer);
            let mut f = fs::File::create(&file).map_err(io_err(&file))?;
            f.write_all(&dataset.matrix(li, layer).to_le_bytes())
                .map_err(io_err(&file))?;
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let manifest_path = path.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Reads and fully validates a dataset directory.
pub fn read_dataset(path: &Path) -> Result<ActivationDataset, DataError> {
    let manifest = read_manifest(path)?;
    let rows = manifest.num_problems();
    let cols = manifest.d_model;
    let expected = (rows * cols * 4) as u64;

    let mut matrices = Vec::with_capacity(manifest.languages.len() * manifest.num_layers);
    for lang in &manifest.languages {
        for layer in 0..manifest.num_layers {
            let file = layer_file(path, lang, layer);
            let meta = match fs::metadata(&file) {
                Ok(meta) if meta.is_file() => meta,
                Ok(_) => {
                    return Err(DataError::MissingFile {
                        language: lang.clone(),
                        layer,
                        path: file,
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(DataError::MissingFile {
                        language: lang.clone(),
                        layer,
                        path: file,
                    })
                }
                Err(e) => return Err(io_err(&file)(e)),
            };
            if meta.len() != expected {
                return Err(DataError::SizeMismatch {
                    language: lang.clone(),
                    layer,
                    expected,
                    actual: meta.len(),
                });
            }
            let bytes = fs::read(&file).map_err(io_err(&file))?;
            if bytes.len() as u64 != expected {
                return Err(DataError::SizeMismatch {
                    language: lang.clone(),
                    layer,
                    expected,
                    actual: bytes.len() as u64,
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let mat = ActivationMatrix { rows, cols, data };
            check_finite(&mat, lang, layer)?;
            matrices.push(mat);
        }
    }
    ActivationDataset::new(manifest, matrices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(langs: &[&str], layers: usize, problems: &[(&str, f64, Split)], d: usize) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            model_name: "toy".into(),
            d_model: d,
            num_layers: layers,
            languages: langs.iter().map(|s| s.to_string()).collect(),
            problems: problems
                .iter()
                .map(|&(id, difficulty, split)| ProblemRecord {
                    id: id.into(),
                    difficulty,
                    split,
                })
                .collect(),
            provenance: BTreeMap::new(),
        }
    }

    fn toy() -> ActivationDataset {
        let m = manifest(&["en"], 1, &[("a", 0.2, Split::Train), ("b", 0.7, Split::Test)], 3);
        let mat = ActivationMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        ActivationDataset::new(m, vec![mat]).unwrap()
    }

    #[test]
    fn write_produces_exact_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(), dir.path()).unwrap();
        assert!(dir.path().join(MANIFEST_FILE).is_file());
        let bytes = fs::read(layer_file(dir.path(), "en", 0)).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[4..8], &2.0f32.to_le_bytes());
    }

    #[test]
    fn out_of_range_difficulty_writes_nothing() {
        let mut m = toy().manifest.clone();
        m.problems[1].difficulty = 1.5;
        let ds = ActivationDataset {
            manifest: m,
            matrices: toy().matrices,
        };
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        assert!(matches!(write_dataset(&ds, &target), Err(DataError::Manifest(_))));
        assert!(!target.exists());
    }

    #[test]
    fn truncated_file_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(), dir.path()).unwrap();
        let f = layer_file(dir.path(), "en", 0);
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::SizeMismatch {
                language,
                layer,
                expected,
                actual,
            }) => {
                assert_eq!((language.as_str(), layer), ("en", 0));
                assert_eq!((expected, actual), (24, 20));
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_language_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(), dir.path()).unwrap();
        let mut m = toy().manifest.clone();
        m.languages.push("fr".into());
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::MissingFile { language, layer, .. }) => {
                assert_eq!((language.as_str(), layer), ("fr", 0));
            }
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_on_disk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(), dir.path()).unwrap();
        let f = layer_file(dir.path(), "en", 0);
        let mut bytes = fs::read(&f).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&f, bytes).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DataError::NonFinite { row: 1, col: 0, layer: 0, .. })
        ));
    }

    #[test]
    fn unknown_manifest_fields_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&toy(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v["future_field"] = serde_json::json!({"x": 1});
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), toy());
    }

    #[test]
    fn manifest_invariants() {
        let mut m = toy().manifest.clone();
        m.languages = vec!["en".into(), "en".into()];
        assert!(m.validate().is_err());
        let mut m = toy().manifest.clone();
        m.problems[1].id = "a".into();
        assert!(m.validate().is_err());
        let mut m = toy().manifest.clone();
        m.languages = vec!["../x".into()];
        assert!(m.validate().is_err());
        let mut m = toy().manifest.clone();
        m.num_layers = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn slice_selects_split_rows() {
        let ds = toy();
        let train = ds.slice("en", 0, Split::Train).unwrap();
        assert_eq!(train.x.nrows(), 1);
        assert_eq!(train.y.as_slice(), &[0.2]);
        assert_eq!(train.ids, vec!["a"]);
        assert_eq!(train.x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(ds.slice("de", 0, Split::Train), Err(DataError::UnknownLanguage(_))));
        assert!(matches!(
            ds.slice("en", 1, Split::Train),
            Err(DataError::LayerOutOfRange { layer: 1, num_layers: 1 })
        ));
    }

    #[test]
    fn empty_split_is_valid() {
        let m = manifest(&["en"], 1, &[("a", 0.2, Split::Train), ("b", 0.7, Split::Train)], 2);
        let ds = ActivationDataset::new(m, vec![ActivationMatrix::new(2, 2, vec![0.0; 4]).unwrap()]).unwrap();
        let test = ds.slice("en", 0, Split::Test).unwrap();
        assert_eq!(test.x.nrows(), 0);
        assert_eq!(test.y.len(), 0);
        assert!(test.ids.is_empty());
    }
}
