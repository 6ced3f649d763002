// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form ridge regression, tie-aware Spearman correlation and the
//! Wilcoxon signed-rank test.
//!
//! Everything here is a pure function over borrowed inputs.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("lambda must be finite and > 0, got {0}")]
    InvalidLambda(f64),

    #[error("ridge system is not positive definite (lambda = {0})")]
    Factorization(f64),

    #[error("degenerate ranking: {0} has zero rank variance")]
    DegenerateRanking(&'static str),

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("signed-rank test needs at least {needed} non-zero differences, got {got}")]
    TooFewPairs { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Fitted ridge probe: `prediction = x . weights + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl RidgeProbe {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(NumericsError::DimensionMismatch(format!(
                "X has {} columns, probe has {} weights",
                x.ncols(),
                self.weights.len()
            )));
        }
        let w = DVector::from_column_slice(&self.weights);
        let mut out = x * w;
        out.add_scalar_mut(self.intercept);
        Ok(out)
    }
}

/// Mean with one correction pass; exact for constant inputs.
fn mean(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let nf = n as f64;
    let m0 = values.clone().sum::<f64>() / nf;
    m0 + values.map(|v| v - m0).sum::<f64>() / nf
}

/// Centered ridge design that can be solved for several lambdas.
///
/// The normal equations `(Xcᵀ Xc + λI) w = Xcᵀ yc` are solved by Cholesky.
/// When there are fewer samples than features the equivalent kernel system
/// `(Xc Xcᵀ + λI) a = yc`, `w = Xcᵀ a` is factored instead, which has the
/// same solution and a smaller matrix.
#[derive(Debug, Clone)]
pub struct RidgeDesign {
    x_mean: DVector<f64>,
    y_mean: f64,
    xc: DMatrix<f64>,
    yc: DVector<f64>,
    /// `Xcᵀ Xc` (primal) or `Xc Xcᵀ` (kernel).
    gram: DMatrix<f64>,
    kernel: bool,
}

impl RidgeDesign {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if y.len() != n {
            return Err(NumericsError::DimensionMismatch(format!(
                "X has {n} rows, y has {} entries",
                y.len()
            )));
        }
        if n < 2 {
            return Err(NumericsError::TooFewSamples { needed: 2, got: n });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("X"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("y"));
        }

        let x_mean = DVector::from_iterator(d, x.column_iter().map(|c| mean(c.iter().copied(), n)));
        let y_mean = mean(y.iter().copied(), n);
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-x_mean[j]);
        }
        let yc = y.map(|v| v - y_mean);

        let kernel = n < d;
        let gram = if kernel { &xc * xc.transpose() } else { xc.tr_mul(&xc) };
        Ok(Self {
            x_mean,
            y_mean,
            xc,
            yc,
            gram,
            kernel,
        })
    }

    pub fn solve(&self, lambda: f64) -> Result<RidgeProbe> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(NumericsError::InvalidLambda(lambda));
        }
        let mut system = self.gram.clone();
        for i in 0..system.nrows() {
            system[(i, i)] += lambda;
        }
        let chol = Cholesky::new(system).ok_or(NumericsError::Factorization(lambda))?;
        let weights = if self.kernel {
            let dual = chol.solve(&self.yc);
            self.xc.tr_mul(&dual)
        } else {
            chol.solve(&self.xc.tr_mul(&self.yc))
        };
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::Factorization(lambda));
        }
        let intercept = self.y_mean - self.x_mean.dot(&weights);
        Ok(RidgeProbe {
            weights: weights.as_slice().to_vec(),
            intercept,
            lambda,
        })
    }
}

/// Fits a ridge probe with a centered intercept.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<RidgeProbe> {
    RidgeDesign::new(x, y)?.solve(lambda)
}

pub fn predict(probe: &RidgeProbe, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    probe.predict(x)
}

/// 1-based average ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector(Vec<f64>);

impl RankVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sorted order of `v` plus the `[start, end)` runs of equal values.
fn tie_runs(v: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut runs = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        runs.push((start, end));
        start = end;
    }
    (order, runs)
}

/// Ranks `v` ascending; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Result<RankVector> {
    if v.is_empty() {
        return Err(NumericsError::TooFewSamples { needed: 1, got: 0 });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite("rank input"));
    }
    let (order, runs) = tie_runs(v);
    let mut ranks = vec![0.0; v.len()];
    for (start, end) in runs {
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
    }
    Ok(RankVector(ranks))
}

/// Spearman's rho: the Pearson correlation of average ranks.
///
/// Constant inputs have no rank variance and are reported as
/// [`NumericsError::DegenerateRanking`] rather than mapped to 0 or NaN.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "spearman inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(NumericsError::TooFewSamples {
            needed: 2,
            got: a.len(),
        });
    }
    let ra = average_ranks(a)?;
    let rb = average_ranks(b)?;
    // Average ranks always have mean (n + 1) / 2, and every quantity below is
    // a small multiple of 1/4, so the sums are exact.
    let centre = (a.len() + 1) as f64 / 2.0;
    let sxx: f64 = ra.0.iter().map(|r| (r - centre).powi(2)).sum();
    let syy: f64 = rb.0.iter().map(|r| (r - centre).powi(2)).sum();
    if sxx == 0.0 {
        return Err(NumericsError::DegenerateRanking("first argument"));
    }
    if syy == 0.0 {
        return Err(NumericsError::DegenerateRanking("second argument"));
    }
    let d2: f64 = ra.0.iter().zip(&rb.0).map(|(x, y)| (x - y).powi(2)).sum();
    // Σd² = sxx + syy - 2 sxy.
    let rho = if sxx == syy {
        1.0 - d2 / (sxx + syy)
    } else {
        (sxx + syy - d2) / (2.0 * (sxx * syy).sqrt())
    };
    Ok(rho.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

pub const WILCOXON_MIN_PAIRS: usize = 6;
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped. Up to [`WILCOXON_EXACT_MAX`] pairs the null
/// distribution of W+ is computed exactly (over all sign assignments of the
/// observed, possibly tied, ranks); beyond that the normal approximation with
/// tie-corrected variance is used, without continuity correction.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(NumericsError::NonFinite("paired differences"));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(NumericsError::AllZeroDifferences);
    }
    let n = nonzero.len();
    if n < WILCOXON_MIN_PAIRS {
        return Err(NumericsError::TooFewPairs {
            needed: WILCOXON_MIN_PAIRS,
            got: n,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs)?.into_inner();
    let w_plus: f64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(r, _)| r)
        .sum();

    let (p_value, method) = if n <= WILCOXON_EXACT_MAX {
        (exact_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let (_, runs) = tie_runs(&abs);
        let tie_term: f64 = runs
            .iter()
            .map(|&(s, e)| {
                let t = (e - s) as f64;
                t * t * t - t
            })
            .sum();
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        (erfc(z.abs() / std::f64::consts::SQRT_2), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value: p_value.clamp(f64::MIN_POSITIVE, 1.0),
        method,
    })
}

/// Exact two-sided p-value from the subset-sum distribution of doubled ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (2.0 * w_plus).round() as i64;
    let total = total as i64;
    let dev_obs = (2 * observed - total).abs();
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| (2 * s as i64 - total).abs() >= dev_obs)
        .map(|(_, &c)| c)
        .sum();
    extreme as f64 / (1u64 << ranks.len()) as f64
}
