//! `millie`: segment blood films, train a bag classifier on sample labels,
//! cross-validate it and score individual cells.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use millie_core::dataio::DataError;
use millie_core::metrics::MetricsError;
use millie_core::model::{EmbeddingLayer, ModelError};
use millie_core::pipeline::PipelineError;
use millie_core::training::TrainError;

mod commands;
mod config;

use config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "millie", version, about = "Multiple-instance learning for white-blood-cell screening")]
struct Cli {
    /// TOML run configuration; every block and key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for generation, training, splitting and test-time augmentation.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    tta_replicas: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, global = true, value_name = "N")]
    k: Option<usize>,
    /// Embedding tap for `pca`: conv or fc1.
    #[arg(long, global = true, value_name = "LAYER", default_value = "conv")]
    layer: EmbeddingLayer,
    /// Output directory.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labelled blood-film corpus.
    Synth {
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        witness_fraction: Option<f64>,
        /// Also segment the corpus into `<out>/segmented`.
        #[arg(long)]
        patches: bool,
    },
    /// Cut every field of a corpus into 200x200 nucleus patches.
    Segment {
        /// Directory holding `manifest.tsv`, or a raw folder with --convention.
        #[arg(long)]
        input: PathBuf,
        /// per-class-dirs, all-idb or bone-marrow.
        #[arg(long)]
        convention: Option<String>,
        /// Glyph truth file; defaults to `<input>/truth.tsv` when present.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train one model on every sample of a patch manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Stratified k-fold cross-validation.
    Crossval {
        #[arg(long)]
        manifest: PathBuf,
        /// Cell annotations; defaults to `cells.tsv` next to the manifest.
        #[arg(long)]
        cells: Option<PathBuf>,
    },
    /// Per-sample class probabilities.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score single cells, with ROC and confusion when annotations are given.
    ScoreCells {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "patches", required_unless_present = "patches")]
        cells: Option<PathBuf>,
        /// Directory of patch PNGs (searched recursively).
        #[arg(long)]
        patches: Option<PathBuf>,
    },
    /// 2-D PCA of cell embeddings, shaded by annotated type.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cells: PathBuf,
    },
}

/// A failed command: exit code plus a one-line `error[kind]: message`.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(1, "config", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(1, "io", message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {}", self.kind, one_line)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NoCells => Self::new(2, "no-cells", "no cells segmented"),
            PipelineError::Config(_) => Self::config(e.to_string()),
            PipelineError::Data(d) => d.into(),
            PipelineError::Train(t) => t.into(),
            PipelineError::Model(m) => m.into(),
            PipelineError::Metrics(m) => m.into(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Config(_) => "config",
            DataError::Io { .. } | DataError::Image(_) => "io",
            DataError::Manifest { .. } => "manifest",
            DataError::BadMagic
            | DataError::UnsupportedVersion(_)
            | DataError::Integrity { .. }
            | DataError::Format(_) => "checkpoint",
        };
        Self::new(1, kind, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Config(_) => "config",
            TrainError::Model(_) => "model",
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => "training",
        };
        Self::new(1, kind, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::new(1, "model", e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Self::new(1, "metrics", e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        tta_replicas: cli.tta_replicas,
        k: cli.k,
    };
    let mut cfg = config::load_config(cli.config.as_deref(), &overrides)?;
    let out = cli.out.ok_or_else(|| Failure::config("--out is required"))?;
    match cli.command {
        Command::Synth {
            samples_per_class,
            witness_fraction,
            patches,
        } => {
            if let Some(n) = samples_per_class {
                cfg.synth.samples_per_class = n;
            }
            if let Some(w) = witness_fraction {
                cfg.synth.witness_fraction = w;
            }
            cfg.validate()?;
            commands::synth(&cfg, &out, patches)
        }
        Command::Segment {
            input,
            convention,
            truth,
        } => commands::segment(&cfg, &input, convention.as_deref(), truth.as_deref(), &out),
        Command::Train { manifest } => commands::train(&cfg, &manifest, &out),
        Command::Crossval { manifest, cells } => commands::crossval(&cfg, &manifest, cells.as_deref(), &out),
        Command::Predict { checkpoint, manifest } => commands::predict(&cfg, &checkpoint, &manifest, &out),
        Command::ScoreCells {
            checkpoint,
            cells,
            patches,
        } => commands::score_cells(&cfg, &checkpoint, cells.as_deref(), patches.as_deref(), &out),
        Command::Pca { checkpoint, cells } => commands::pca(&cfg, &checkpoint, &cells, cli.layer, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code)
        }
    }
}
