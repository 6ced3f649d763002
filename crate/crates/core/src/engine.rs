// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe training over the (language, layer, lambda) grid, the performance
//! cube, and the transfer statistics derived from it.
//!
//! Conventions used throughout:
//!
//! - A probe trained on `(A, l)` is only ever applied to features of the same
//!   layer `l`.
//! - Every argmax over layers and every mode breaks ties toward the smallest
//!   layer index.
//! - Lambda selection ties break toward the largest lambda.
//! - Standard deviations are sample (n - 1) deviations.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ActivationDataset, ActivationMatrix, DataError, Split};
use crate::numerics::{spearman_rho, wilcoxon_signed_rank, NumericsError, RidgeDesign, RidgeProbe};

/// Identifies the tie-breaking conventions above; bump when they change.
pub const TIE_RULES_VERSION: &str = "argmax-lowest-layer/mode-lowest-layer/lambda-largest/v1";

/// Fraction of train problems held out in [`SelectionSplit::Dev`] mode.
pub const DEV_FRACTION_DENOM: usize = 5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error("lambda grid must be non-empty with finite positive values, got {0:?}")]
    InvalidLambdaGrid(Vec<f64>),

    #[error("need at least 2 problems in the {what} set, got {got}")]
    TooFewProblems { what: &'static str, got: usize },

    #[error("need at least 2 languages, got {0}")]
    TooFewLanguages(usize),

    #[error("ridge fit failed for ({train_language:?}, layer {layer}): {source}")]
    Fit {
        train_language: String,
        layer: usize,
        #[source]
        source: NumericsError,
    },

    #[error("degenerate ranking for train {train_language:?}, test {test_language:?}, layer {layer}{}: {source}",
            lambda.map(|l| format!(", lambda {l}")).unwrap_or_default())]
    Degenerate {
        train_language: String,
        test_language: String,
        layer: usize,
        lambda: Option<f64>,
        #[source]
        source: NumericsError,
    },

    #[error("grid and dataset disagree: {0}")]
    Mismatch(String),

    #[error("invalid performance cube: {0}")]
    InvalidCube(String),
}

impl EngineError {
    /// True for failures caused by degenerate metrics rather than bad input.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, EngineError::Degenerate { .. })
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSplit {
    /// Select lambda on the test split (the held-out problems).
    #[default]
    Test,
    /// Hold out the last fifth of the train problems for selection, then
    /// refit on the full train split with the chosen lambda.
    Dev,
}

impl std::str::FromStr for SelectionSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "test" => Ok(Self::Test),
            "dev" => Ok(Self::Dev),
            other => Err(format!("unknown selection split {other:?} (expected test or dev)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub train_language: String,
    pub layer: usize,
    pub ridge: RidgeProbe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    languages: Vec<String>,
    num_layers: usize,
    /// Language-major, `lang * num_layers + layer`.
    probes: Vec<ProbeModel>,
    lambda_grid: Vec<f64>,
    selection_split: SelectionSplit,
}

impl ProbeGrid {
    /// Assembles a grid from language-major probes.
    pub fn from_probes(
        languages: Vec<String>,
        num_layers: usize,
        probes: Vec<ProbeModel>,
        lambda_grid: Vec<f64>,
        selection_split: SelectionSplit,
    ) -> Result<Self> {
        if probes.len() != languages.len() * num_layers {
            return Err(EngineError::Mismatch(format!(
                "{} probes for {} languages x {num_layers} layers",
                probes.len(),
                languages.len()
            )));
        }
        Ok(Self {
            languages,
            num_layers,
            probes,
            lambda_grid,
            selection_split,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn lambda_grid(&self) -> &[f64] {
        &self.lambda_grid
    }

    pub fn selection_split(&self) -> SelectionSplit {
        self.selection_split
    }

    pub fn probe(&self, lang_idx: usize, layer: usize) -> &ProbeModel {
        &self.probes[lang_idx * self.num_layers + layer]
    }

    pub fn probes(&self) -> &[ProbeModel] {
        &self.probes
    }
}

/// Spearman rho for every (train language, test language, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfCube {
    languages: Vec<String>,
    num_layers: usize,
    /// Index `(a * n_lang + b) * num_layers + l`.
    rho: Vec<f64>,
}

impl PerfCube {
    pub fn new(languages: Vec<String>, num_layers: usize, rho: Vec<f64>) -> Result<Self> {
        let n = languages.len();
        if n == 0 || num_layers == 0 {
            return Err(EngineError::InvalidCube("empty language or layer axis".into()));
        }
        if rho.len() != n * n * num_layers {
            return Err(EngineError::InvalidCube(format!(
                "expected {} entries, got {}",
                n * n * num_layers,
                rho.len()
            )));
        }
        if let Some(v) = rho.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(EngineError::InvalidCube(format!("value {v} outside [-1, 1]")));
        }
        Ok(Self {
            languages,
            num_layers,
            rho,
        })
    }

    pub fn from_fn(
        languages: Vec<String>,
        num_layers: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let n = languages.len();
        let mut rho = Vec::with_capacity(n * n * num_layers);
        for a in 0..n {
            for b in 0..n {
                for l in 0..num_layers {
                    rho.push(f(a, b, l));
                }
            }
        }
        Self::new(languages, num_layers, rho)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn get(&self, a: usize, b: usize, layer: usize) -> f64 {
        self.rho[(a * self.languages.len() + b) * self.num_layers + layer]
    }

    /// Layer-wise profile of the pair `(a, b)`.
    pub fn profile(&self, a: usize, b: usize) -> &[f64] {
        let start = (a * self.languages.len() + b) * self.num_layers;
        &self.rho[start..start + self.num_layers]
    }
}

fn check_lambda_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(EngineError::InvalidLambdaGrid(grid.to_vec()));
    }
    Ok(())
}

/// Probe predictions straight from the stored `f32` rows.
fn predict_rows(probe: &RidgeProbe, mat: &ActivationMatrix, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&r| {
            probe.intercept
                + mat
                    .row(r)
                    .iter()
                    .zip(&probe.weights)
                    .map(|(&x, w)| f64::from(x) * w)
                    .sum::<f64>()
        })
        .collect()
}

struct SplitPlan {
    /// Rows used to fit during selection.
    fit: Vec<usize>,
    /// Rows scored during selection.
    select: Vec<usize>,
    /// Rows of the final fit; `None` means the selection fit is kept.
    refit: Option<Vec<usize>>,
}

fn plan_split(dataset: &ActivationDataset, selection: SelectionSplit) -> Result<SplitPlan> {
    let manifest = dataset.manifest();
    let train = manifest.split_indices(Split::Train);
    if train.len() < 2 {
        return Err(EngineError::TooFewProblems {
            what: "train",
            got: train.len(),
        });
    }
    let plan = match selection {
        SelectionSplit::Test => SplitPlan {
            fit: train,
            select: manifest.split_indices(Split::Test),
            refit: None,
        },
        SelectionSplit::Dev => {
            let n_dev = train.len().div_ceil(DEV_FRACTION_DENOM);
            let cut = train.len() - n_dev;
            if cut < 2 {
                return Err(EngineError::TooFewProblems {
                    what: "train (after dev hold-out)",
                    got: cut,
                });
            }
            SplitPlan {
                fit: train[..cut].to_vec(),
                select: train[cut..].to_vec(),
                refit: Some(train),
            }
        }
    };
    if plan.select.len() < 2 {
        return Err(EngineError::TooFewProblems {
            what: "selection",
            got: plan.select.len(),
        });
    }
    Ok(plan)
}

fn train_cell(
    dataset: &ActivationDataset,
    plan: &SplitPlan,
    lambda_grid: &[f64],
    a: usize,
    layer: usize,
) -> Result<ProbeModel> {
    let manifest = dataset.manifest();
    let lang = &manifest.languages[a];
    let fit_err = |source| EngineError::Fit {
        train_language: lang.clone(),
        layer,
        source,
    };
    let mat = dataset.matrix(a, layer);
    let design = RidgeDesign::new(&mat.gather(&plan.fit), &manifest.difficulties(&plan.fit))
        .map_err(fit_err)?;
    let y_sel = manifest.difficulties(&plan.select);

    let mut best: Option<(f64, RidgeProbe)> = None;
    for &lambda in lambda_grid {
        let probe = design.solve(lambda).map_err(fit_err)?;
        let mut total = 0.0;
        for (b, test_lang) in manifest.languages.iter().enumerate() {
            let pred = predict_rows(&probe, dataset.matrix(b, layer), &plan.select);
            total += spearman_rho(&pred, y_sel.as_slice()).map_err(|source| {
                EngineError::Degenerate {
                    train_language: lang.clone(),
                    test_language: test_lang.clone(),
                    layer,
                    lambda: Some(lambda),
                    source,
                }
            })?;
        }
        let score = total / manifest.languages.len() as f64;
        let better = match &best {
            None => true,
            Some((s, p)) => score > *s || (score == *s && lambda > p.lambda),
        };
        if better {
            best = Some((score, probe));
        }
    }
    let (_, mut ridge) = best.expect("lambda grid is non-empty");
    if let Some(rows) = &plan.refit {
        ridge = RidgeDesign::new(&mat.gather(rows), &manifest.difficulties(rows))
            .and_then(|d| d.solve(ridge.lambda))
            .map_err(fit_err)?;
    }
    Ok(ProbeModel {
        train_language: lang.clone(),
        layer,
        ridge,
    })
}

/// Fits one probe per (language, layer), choosing lambda per cell by the mean
/// Spearman rho over all test languages on the selection split.
pub fn train_probe_grid(
    dataset: &ActivationDataset,
    lambda_grid: &[f64],
    selection_split: SelectionSplit,
) -> Result<ProbeGrid> {
    check_lambda_grid(lambda_grid)?;
    let plan = plan_split(dataset, selection_split)?;
    let n_layers = dataset.num_layers();
    let cells = dataset.languages().len() * n_layers;
    let probes = (0..cells)
        .into_par_iter()
        .map(|cell| train_cell(dataset, &plan, lambda_grid, cell / n_layers, cell % n_layers))
        .collect::<Result<Vec<_>>>()?;
    ProbeGrid::from_probes(
        dataset.languages().to_vec(),
        n_layers,
        probes,
        lambda_grid.to_vec(),
        selection_split,
    )
}

/// Evaluates every probe on every language's test split at its own layer.
pub fn evaluate_cube(grid: &ProbeGrid, dataset: &ActivationDataset) -> Result<PerfCube> {
    if grid.languages() != dataset.languages() {
        return Err(EngineError::Mismatch(format!(
            "grid languages {:?} vs dataset languages {:?}",
            grid.languages(),
            dataset.languages()
        )));
    }
    if grid.num_layers() != dataset.num_layers() {
        return Err(EngineError::Mismatch(format!(
            "grid has {} layers, dataset has {}",
            grid.num_layers(),
            dataset.num_layers()
        )));
    }
    let manifest = dataset.manifest();
    let test_rows = manifest.split_indices(Split::Test);
    if test_rows.len() < 2 {
        return Err(EngineError::TooFewProblems {
            what: "test",
            got: test_rows.len(),
        });
    }
    let y_test: DVector<f64> = manifest.difficulties(&test_rows);
    let n_lang = manifest.languages.len();
    let n_layers = grid.num_layers();

    // One task per (A, l); each writes the n_lang entries rho(A, ., l).
    let columns = (0..n_lang * n_layers)
        .into_par_iter()
        .map(|cell| {
            let (a, layer) = (cell / n_layers, cell % n_layers);
            let probe = grid.probe(a, layer);
            (0..n_lang)
                .map(|b| {
                    let pred = predict_rows(&probe.ridge, dataset.matrix(b, layer), &test_rows);
                    spearman_rho(&pred, y_test.as_slice()).map_err(|source| EngineError::Degenerate {
                        train_language: manifest.languages[a].clone(),
                        test_language: manifest.languages[b].clone(),
                        layer,
                        lambda: Some(probe.ridge.lambda),
                        source,
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rho = vec![0.0; n_lang * n_lang * n_layers];
    for (cell, values) in columns.into_iter().enumerate() {
        let (a, layer) = (cell / n_layers, cell % n_layers);
        for (b, v) in values.into_iter().enumerate() {
            rho[(a * n_lang + b) * n_layers + layer] = v;
        }
    }
    PerfCube::new(manifest.languages.clone(), n_layers, rho)
}

/// Smallest index attaining the maximum.
fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Most frequent value; ties go to the smallest.
fn mode_lowest(values: &[usize], num_bins: usize) -> usize {
    let mut counts = vec![0usize; num_bins];
    for &v in values {
        counts[v] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn require_two_languages(cube: &PerfCube) -> Result<()> {
    match cube.num_languages() {
        n if n < 2 => Err(EngineError::TooFewLanguages(n)),
        _ => Ok(()),
    }
}

/// `(A, B) -> max_l rho(A, B, l)`.
pub fn max_rho_matrix(cube: &PerfCube) -> Vec<Vec<f64>> {
    let n = cube.num_languages();
    (0..n)
        .map(|a| (0..n).map(|b| max_of(cube.profile(a, b))).collect())
        .collect()
}

/// `(A, B) -> smallest l maximising rho(A, B, l)`.
pub fn argmax_layer_matrix(cube: &PerfCube) -> Vec<Vec<usize>> {
    let n = cube.num_languages();
    (0..n)
        .map(|a| (0..n).map(|b| argmax_lowest(cube.profile(a, b))).collect())
        .collect()
}

/// `(B, l) -> mean over A != B of rho(A, B, l)`.
pub fn layerwise_transfer_heatmap(cube: &PerfCube) -> Result<Vec<Vec<f64>>> {
    require_two_languages(cube)?;
    let n = cube.num_languages();
    Ok((0..n)
        .map(|b| {
            (0..cube.num_layers())
                .map(|l| {
                    let vals: Vec<f64> = (0..n).filter(|&a| a != b).map(|a| cube.get(a, b, l)).collect();
                    mean(&vals)
                })
                .collect()
        })
        .collect())
}

pub fn diagonal_optimal_layers(cube: &PerfCube) -> Vec<usize> {
    (0..cube.num_languages())
        .map(|a| argmax_lowest(cube.profile(a, a)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDrop {
    pub mean: f64,
    /// `(A, B)` drop; the diagonal is zero by construction.
    pub per_pair: Vec<Vec<f64>>,
}

/// Cross-lingual loss from fixing each probe at its language's
/// diagonal-optimal layer.
pub fn transfer_drop(cube: &PerfCube) -> Result<TransferDrop> {
    require_two_languages(cube)?;
    let n = cube.num_languages();
    let diag = diagonal_optimal_layers(cube);
    let per_pair: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| max_of(cube.profile(a, b)) - cube.get(a, b, diag[a]))
                .collect()
        })
        .collect();
    let row_means: Vec<f64> = (0..n)
        .map(|a| {
            let off: Vec<f64> = (0..n).filter(|&b| b != a).map(|b| per_pair[a][b]).collect();
            mean(&off)
        })
        .collect();
    Ok(TransferDrop {
        mean: mean(&row_means),
        per_pair,
    })
}

/// Per training language, the mode over B != A of the per-pair best layer.
pub fn transfer_optimal_layers(cube: &PerfCube) -> Result<Vec<usize>> {
    require_two_languages(cube)?;
    let n = cube.num_languages();
    Ok((0..n)
        .map(|a| {
            let layers: Vec<usize> = (0..n)
                .filter(|&b| b != a)
                .map(|b| argmax_lowest(cube.profile(a, b)))
                .collect();
            mode_lowest(&layers, cube.num_layers())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InLanguageDrop {
    pub mean: f64,
    pub per_language: Vec<f64>,
}

/// Same-language loss from fixing each probe at its transfer-optimal layer.
pub fn in_language_drop(cube: &PerfCube) -> Result<InLanguageDrop> {
    let transfer = transfer_optimal_layers(cube)?;
    let per_language: Vec<f64> = transfer
        .iter()
        .enumerate()
        .map(|(a, &l)| max_of(cube.profile(a, a)) - cube.get(a, a, l))
        .collect();
    Ok(InLanguageDrop {
        mean: mean(&per_language),
        per_language,
    })
}

/// Per language: diagonal max rho minus the mean off-diagonal max rho of its
/// row. These are the pairs fed to the signed-rank test.
pub fn paired_differences(cube: &PerfCube) -> Result<Vec<f64>> {
    require_two_languages(cube)?;
    let m = max_rho_matrix(cube);
    let n = m.len();
    Ok((0..n)
        .map(|a| {
            let off: Vec<f64> = (0..n).filter(|&b| b != a).map(|b| m[a][b]).collect();
            m[a][a] - mean(&off)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub languages: Vec<String>,
    pub num_layers: usize,
    pub max_rho_matrix: Vec<Vec<f64>>,
    pub argmax_layer_matrix: Vec<Vec<usize>>,
    /// Rows are test languages, columns layers.
    pub layerwise_heatmap: Vec<Vec<f64>>,
    pub diag_optimal_layers: Vec<usize>,
    pub transfer_optimal_layers: Vec<usize>,
    pub diag_mean: f64,
    pub diag_std: f64,
    pub offdiag_mean: f64,
    pub offdiag_std: f64,
    pub mean_peak_layer_diag: f64,
    pub mean_peak_layer_offdiag: f64,
    pub transfer_drop: f64,
    pub transfer_drop_per_pair: Vec<Vec<f64>>,
    pub in_language_drop: f64,
    pub in_language_drop_per_language: Vec<f64>,
    /// Wilcoxon p-value over [`paired_differences`]; `None` when fewer than
    /// six languages have a non-zero difference.
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_split: Option<SelectionSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
}

pub fn summarize(cube: &PerfCube) -> Result<TransferReport> {
    require_two_languages(cube)?;
    let n = cube.num_languages();
    let max_rho = max_rho_matrix(cube);
    let argmax = argmax_layer_matrix(cube);

    let mut diag = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n * (n - 1));
    let mut diag_peak = Vec::with_capacity(n);
    let mut off_peak = Vec::with_capacity(n * (n - 1));
    for a in 0..n {
        for b in 0..n {
            if a == b {
                diag.push(max_rho[a][b]);
                diag_peak.push(argmax[a][b] as f64);
            } else {
                off.push(max_rho[a][b]);
                off_peak.push(argmax[a][b] as f64);
            }
        }
    }

    let td = transfer_drop(cube)?;
    let ild = in_language_drop(cube)?;
    let p_value = wilcoxon_signed_rank(&paired_differences(cube)?)
        .ok()
        .map(|r| r.p_value);

    Ok(TransferReport {
        languages: cube.languages().to_vec(),
        num_layers: cube.num_layers(),
        layerwise_heatmap: layerwise_transfer_heatmap(cube)?,
        diag_optimal_layers: diagonal_optimal_layers(cube),
        transfer_optimal_layers: transfer_optimal_layers(cube)?,
        diag_mean: mean(&diag),
        diag_std: sample_std(&diag),
        offdiag_mean: mean(&off),
        offdiag_std: sample_std(&off),
        mean_peak_layer_diag: mean(&diag_peak),
        mean_peak_layer_offdiag: mean(&off_peak),
        transfer_drop: td.mean,
        transfer_drop_per_pair: td.per_pair,
        in_language_drop: ild.mean,
        in_language_drop_per_language: ild.per_language,
        p_value,
        max_rho_matrix: max_rho,
        argmax_layer_matrix: argmax,
        selection_split: None,
        lambda_grid: None,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub grid: ProbeGrid,
    pub cube: PerfCube,
    pub report: TransferReport,
}

/// Train, evaluate and summarise in one call. Runs on the current rayon pool.
pub fn run_pipeline(
    dataset: &ActivationDataset,
    lambda_grid: &[f64],
    selection_split: SelectionSplit,
) -> Result<PipelineOutput> {
    let grid = train_probe_grid(dataset, lambda_grid, selection_split)?;
    let cube = evaluate_cube(&grid, dataset)?;
    let mut report = summarize(&cube)?;
    report.selection_split = Some(selection_split);
    report.lambda_grid = Some(lambda_grid.to_vec());
    Ok(PipelineOutput { grid, cube, report })
}
