// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-direction synthetic activation datasets.
//!
//! For problem `i`, language `L` and layer `l` the activation is
//!
//! ```text
//! x = alpha[l] * d_i * u_shared + beta[l] * d_i * u_L + offset_scale * o_L + noise_sigma * eps
//! ```
//!
//! with `d_i ~ U[0, 1]`, an orthonormal set `{u_shared, u_L}`, a fixed
//! per-language standard-normal offset `o_L` and isotropic standard-normal
//! noise. A shared direction that peaks mid-depth and language-specific
//! directions that grow with depth give a known ground truth for the
//! cross-lingual transfer statistics.
//!
//! Randomness comes from ChaCha20 keyed by the seed, with one independent
//! stream per (purpose, language, layer), so the output does not depend on
//! how generation is scheduled.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    ActivationDataset, ActivationMatrix, DataError, Manifest, ProblemRecord, Split, FORMAT_VERSION,
};

pub const RNG_DESCRIPTION: &str =
    "ChaCha20 (rand_chacha 0.9), key = seed as little-endian u64 zero-padded to 32 bytes, \
     stream = purpose << 48 | language << 24 | layer; normals via rand_distr StandardNormal";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),

    #[error("d_model ({d_model}) must be at least num_languages + 1 ({needed})")]
    DModelTooSmall { d_model: usize, needed: usize },

    #[error("mixing profile needs num_layers >= 3, got {0}")]
    TooFewLayers(usize),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("cannot read synth config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed synth config: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_languages: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Shared-signal gain per layer. Omitted in JSON means the default
    /// triangular profile.
    #[serde(default)]
    pub alpha_profile: Vec<f64>,
    /// Language-specific gain per layer. Omitted in JSON means the default
    /// ramp.
    #[serde(default)]
    pub beta_profile: Vec<f64>,
    pub noise_sigma: f64,
    pub offset_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Default profiles, `noise_sigma = 0.5`, `offset_scale = 1`.
    pub fn with_defaults(
        num_languages: usize,
        num_layers: usize,
        d_model: usize,
        num_train: usize,
        num_test: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            num_languages,
            num_layers,
            d_model,
            num_train,
            num_test,
            alpha_profile: mixing_profile(ProfileKind::AlphaDefault, num_layers)?,
            beta_profile: mixing_profile(ProfileKind::BetaDefault, num_layers)?,
            noise_sigma: 0.5,
            offset_scale: 1.0,
            seed,
        })
    }

    /// Parses JSON, filling omitted profiles with the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        if cfg.alpha_profile.is_empty() {
            cfg.alpha_profile = mixing_profile(ProfileKind::AlphaDefault, cfg.num_layers)?;
        }
        if cfg.beta_profile.is_empty() {
            cfg.beta_profile = mixing_profile(ProfileKind::BetaDefault, cfg.num_layers)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        if self.num_languages < 2 {
            return bad(format!("num_languages must be >= 2, got {}", self.num_languages));
        }
        if self.num_layers < 3 {
            return bad(format!("num_layers must be >= 3, got {}", self.num_layers));
        }
        if self.d_model < 8 {
            return bad(format!("d_model must be >= 8, got {}", self.d_model));
        }
        if self.d_model < self.num_languages + 1 {
            return Err(SynthError::DModelTooSmall {
                d_model: self.d_model,
                needed: self.num_languages + 1,
            });
        }
        if self.num_train < 20 || self.num_test < 20 {
            return bad(format!(
                "num_train and num_test must be >= 20, got {} and {}",
                self.num_train, self.num_test
            ));
        }
        for (name, profile) in [("alpha_profile", &self.alpha_profile), ("beta_profile", &self.beta_profile)] {
            if profile.len() != self.num_layers {
                return bad(format!(
                    "{name} has {} entries, expected num_layers = {}",
                    profile.len(),
                    self.num_layers
                ));
            }
            if profile.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("{name} entries must be finite and >= 0"));
            }
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("offset_scale", self.offset_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    AlphaDefault,
    BetaDefault,
}

/// Default per-layer gains.
///
/// `AlphaDefault` is a triangular bump equal to 1 at `num_layers / 2` and 0.2
/// at both ends. `BetaDefault` is 0 over the first third of the layers, then
/// rises linearly to 1.5 at the last layer.
pub fn mixing_profile(kind: ProfileKind, num_layers: usize) -> Result<Vec<f64>> {
    if num_layers < 3 {
        return Err(SynthError::TooFewLayers(num_layers));
    }
    let last = num_layers - 1;
    Ok(match kind {
        ProfileKind::AlphaDefault => {
            let peak = num_layers / 2;
            (0..num_layers)
                .map(|l| {
                    let frac = if l <= peak {
                        l as f64 / peak as f64
                    } else {
                        (last - l) as f64 / (last - peak) as f64
                    };
                    0.2 + 0.8 * frac
                })
                .collect()
        }
        ProfileKind::BetaDefault => {
            let flat = num_layers / 3;
            let span = (num_layers - flat) as f64;
            (0..num_layers)
                .map(|l| {
                    if l < flat {
                        0.0
                    } else {
                        1.5 * (l - flat + 1) as f64 / span
                    }
                })
                .collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBasis {
    pub u_shared: Vec<f64>,
    pub u_lang: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
enum Stream {
    Difficulty = 1,
    Basis = 2,
    Offset = 3,
    Noise = 4,
}

fn rng_for(seed: u64, stream: Stream, language: usize, layer: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(((stream as u64) << 48) | ((language as u64) << 24) | layer as u64);
    rng
}

fn normal_vec(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal `{u_shared, u_lang...}` from Gram-Schmidt (applied twice) on
/// standard-normal draws.
pub fn planted_basis(config: &SynthConfig) -> Result<PlantedBasis> {
    let needed = config.num_languages + 1;
    if config.d_model < needed {
        return Err(SynthError::DModelTooSmall {
            d_model: config.d_model,
            needed,
        });
    }
    let mut rng = rng_for(config.seed, Stream::Basis, 0, 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(needed);
    while basis.len() < needed {
        let mut v = normal_vec(&mut rng, config.d_model);
        for _ in 0..2 {
            for u in &basis {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
            }
        }
        let norm = dot(&v, &v).sqrt();
        // A draw almost inside the current span is discarded and redrawn.
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let u_shared = basis.remove(0);
    Ok(PlantedBasis {
        u_shared,
        u_lang: basis,
    })
}

pub fn language_code(index: usize) -> String {
    format!("syn{index}")
}

/// Generates a dataset from `config`. Pure in `config`: equal configs give
/// bit-identical datasets.
pub fn generate(config: &SynthConfig) -> Result<ActivationDataset> {
    config.validate()?;
    let basis = planted_basis(config)?;
    let n = config.num_train + config.num_test;
    let d = config.d_model;

    let mut diff_rng = rng_for(config.seed, Stream::Difficulty, 0, 0);
    let difficulty: Vec<f64> = (0..n).map(|_| diff_rng.random::<f64>()).collect();
    let offsets: Vec<Vec<f64>> = (0..config.num_languages)
        .map(|lang| normal_vec(&mut rng_for(config.seed, Stream::Offset, lang, 0), d))
        .collect();

    let cells = config.num_languages * config.num_layers;
    let matrices: Vec<ActivationMatrix> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let (lang, layer) = (cell / config.num_layers, cell % config.num_layers);
            let mut noise = rng_for(config.seed, Stream::Noise, lang, layer);
            let alpha = config.alpha_profile[layer];
            let beta = config.beta_profile[layer];
            let mut data = Vec::with_capacity(n * d);
            for &di in &difficulty {
                for k in 0..d {
                    let eps: f64 = noise.sample(StandardNormal);
                    let v = alpha * di * basis.u_shared[k]
                        + beta * di * basis.u_lang[lang][k]
                        + config.offset_scale * offsets[lang][k]
                        + config.noise_sigma * eps;
                    data.push(v as f32);
                }
            }
            ActivationMatrix::new(n, d, data).expect("shape matches")
        })
        .collect();

    let problems = difficulty
        .iter()
        .enumerate()
        .map(|(i, &difficulty)| ProblemRecord {
            id: format!("p{i:06}"),
            difficulty,
            split: if i < config.num_train { Split::Train } else { Split::Test },
        })
        .collect();
    let mut provenance = BTreeMap::new();
    provenance.insert("generator".into(), "planted-direction".into());
    provenance.insert("rng".into(), RNG_DESCRIPTION.into());
    provenance.insert("seed".into(), config.seed.to_string());
    provenance.insert("storage_precision".into(), "float32".into());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_name: "synthetic-planted-direction".into(),
        d_model: d,
        num_layers: config.num_layers,
        languages: (0..config.num_languages).map(language_code).collect(),
        problems,
        provenance,
    };
    Ok(ActivationDataset::new(manifest, matrices)?)
}
