// SPDX-License-Identifier: MIT OR Apache-2.0

//! `xlprobe`: synthetic data generation, probe runs and summary rendering.
//!
//! Exit codes: 0 success, 1 invalid input, 2 degenerate metric.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use xlprobe_core::datamodel::{self, MANIFEST_FILE};
use xlprobe_core::engine::{self, SelectionSplit, TIE_RULES_VERSION};
use xlprobe_core::report::{self, SummaryFormat, SummaryRow};
use xlprobe_core::synthgen::{self, SynthConfig};
use xlprobe_core::DEFAULT_LAMBDA_GRID;

const RUN_META_FILE: &str = "run_meta.json";

#[derive(Parser)]
#[command(name = "xlprobe", version, about = "Cross-lingual difficulty probing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-direction dataset.
    GenSynth {
        /// JSON generator config.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the probe grid, evaluate the cube and write reports.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated ridge penalties.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Split used to select lambda: test or dev.
        #[arg(long)]
        select_split: Option<SelectionSplit>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (at least 1).
        #[arg(long)]
        workers: Option<usize>,
        /// JSON run config; command-line flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render the summary row of a report.json.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// csv, json or markdown.
        #[arg(long, default_value = "markdown")]
        format: SummaryFormat,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    lambdas: Option<Vec<f64>>,
    select_split: Option<SelectionSplit>,
    workers: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RunConfig {
    lambdas: Vec<f64>,
    select_split: SelectionSplit,
    workers: usize,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    toolkit_version: &'a str,
    tie_rules_version: &'a str,
    config: &'a RunConfig,
    dataset_path: String,
    dataset_sha256: String,
    dataset_provenance: &'a std::collections::BTreeMap<String, String>,
    timestamp_unix: u64,
}

enum Failure {
    Input(String),
    Degenerate(String),
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<engine::EngineError> for Failure {
    fn from(e: engine::EngineError) -> Self {
        if e.is_degenerate() {
            Failure::Degenerate(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenSynth { config, out } => gen_synth(&config, &out),
        Command::Run {
            dataset,
            lambdas,
            select_split,
            out,
            workers,
            config,
        } => resolve_run_config(config.as_deref(), lambdas, select_split, workers)
            .and_then(|cfg| run(&dataset, &out, &cfg)),
        Command::Report { report, format } => render_report(&report, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Degenerate(msg)) => {
            eprintln!("degenerate metric: {msg}");
            ExitCode::from(2)
        }
    }
}

fn gen_synth(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = SynthConfig::from_file(config).map_err(Failure::input)?;
    let ds = synthgen::generate(&cfg).map_err(Failure::input)?;
    datamodel::write_dataset(&ds, out).map_err(Failure::input)?;
    let m = ds.manifest();
    let n_train = m.split_indices(datamodel::Split::Train).len();
    let n_test = m.split_indices(datamodel::Split::Test).len();
    println!("wrote {}", out.display());
    println!("languages: {}", m.languages.join(","));
    println!("layers: {}", m.num_layers);
    println!("d_model: {}", m.d_model);
    println!("problems: {} train, {} test", n_train, n_test);
    Ok(())
}

fn resolve_run_config(
    path: Option<&Path>,
    lambdas: Option<Vec<f64>>,
    select_split: Option<SelectionSplit>,
    workers: Option<usize>,
) -> Result<RunConfig, Failure> {
    let file = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Input(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<RunConfigFile>(&text)
                .map_err(|e| Failure::Input(format!("malformed run config {}: {e}", p.display())))?
        }
        None => RunConfigFile::default(),
    };
    let cfg = RunConfig {
        lambdas: lambdas
            .or(file.lambdas)
            .unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec()),
        select_split: select_split.or(file.select_split).unwrap_or_default(),
        workers: workers.or(file.workers).unwrap_or(1),
    };
    if cfg.workers == 0 {
        return Err(Failure::input("workers must be at least 1"));
    }
    Ok(cfg)
}

fn run(dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let ds = datamodel::read_dataset(dataset).map_err(Failure::input)?;
    let sha = dataset_sha256(dataset, ds.manifest()).map_err(Failure::input)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(Failure::input)?;
    let output = pool.install(|| engine::run_pipeline(&ds, &cfg.lambdas, cfg.select_split))?;
    report::write_outputs(out, &output.report, Some((&output.cube, &output.grid)))
        .map_err(|e| Failure::Input(format!("cannot write {}: {e}", out.display())))?;

    let meta = RunMeta {
        toolkit_version: env!("CARGO_PKG_VERSION"),
        tie_rules_version: TIE_RULES_VERSION,
        config: cfg,
        dataset_path: dataset.display().to_string(),
        dataset_sha256: sha,
        dataset_provenance: &ds.manifest().provenance,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let mut text = serde_json::to_string_pretty(&meta).map_err(Failure::input)?;
    text.push('\n');
    fs::write(out.join(RUN_META_FILE), text)
        .map_err(|e| Failure::Input(format!("cannot write {RUN_META_FILE}: {e}")))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// SHA-256 over manifest.json followed by every activation file, language
/// major, in manifest order.
fn dataset_sha256(root: &Path, manifest: &datamodel::Manifest) -> std::io::Result<String> {
    let mut hasher = Sha256::new();
    let mut paths = vec![root.join(MANIFEST_FILE)];
    for lang in &manifest.languages {
        for layer in 0..manifest.num_layers {
            paths.push(datamodel::layer_file(root, lang, layer));
        }
    }
    let mut buf = vec![0u8; 1 << 16];
    for p in paths {
        let mut f = fs::File::open(&p)?;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

fn render_report(path: &Path, format: SummaryFormat) -> Result<(), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    let row: SummaryRow = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    print!("{}", report::render_summary(&row, format).map_err(Failure::input)?);
    Ok(())
}
