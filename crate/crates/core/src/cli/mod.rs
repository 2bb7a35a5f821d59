//! The `docmsu` command line.
//!
//! Exit codes: 0 success, 2 validation failure, 3 missing artifact,
//! 1 anything else.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::error::Error;
use crate::model::train::Task;
use crate::model::Preset;

#[derive(Debug, Parser)]
#[command(name = "docmsu", version, about = "Document-level multimodal sarcasm detection and localization")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, shuffling and fixture generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory that receives every output of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset and write its normalized form plus statistics.
    Ingest(IngestArgs),
    /// Score triple annotations and pick the canonical annotator.
    ValidateAnnotations(ValidateArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Score predictions, or run a checkpoint over a split and score it.
    Evaluate(EvaluateArgs),
    /// Render per-stage heatmaps for one record.
    VisualizeAttention(VisualizeArgs),
    /// Write a synthetic dataset with planted clues.
    GenFixtures(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Dataset JSONL.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Missing images are errors.
    #[arg(long)]
    pub strict_images: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// JSONL of `{id, annotations: [3 annotation sets]}`.
    #[arg(long)]
    pub input: PathBuf,
    /// Share of samples flagged as challenging.
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Train this many seeds (starting at the run seed), evaluate each on
    /// the test split and report mean and variance.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction JSONL to score against `--gold`.
    #[arg(long, requires = "gold", conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Gold dataset JSONL for `--predictions`.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Checkpoint to run over `--split` of the dataset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Record to render.
    #[arg(long)]
    pub id: String,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 90)]
    pub n: usize,
    #[arg(long, default_value_t = 224)]
    pub image_size: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Detect,
    Localize,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Detect => Task::Detect,
            TaskArg::Localize => Task::Localize,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Small,
    Base,
    Test,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Small => Preset::Small,
            PresetArg::Base => Preset::Base,
            PresetArg::Test => Preset::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Malformed { .. }
        | Error::Validation { .. }
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::DocumentTooLong { .. }
        | Error::Config(_) => 2,
        Error::MissingArtifact(_) | Error::MissingImage { .. } => 3,
        _ => 1,
    }
}

fn set(obj: &mut Map<String, Value>, path: &[&str], value: Value) {
    match path {
        [last] => {
            obj.insert(last.to_string(), value);
        }
        [head, rest @ ..] => {
            let child = obj.entry(head.to_string()).or_insert_with(|| json!({}));
            if let Value::Object(m) = child {
                set(m, rest, value);
            }
        }
        [] => {}
    }
}

impl Cli {
    /// The config keys set by flags, as a partial [`config::RunConfig`].
    pub fn overrides(&self) -> Value {
        let mut o = Map::new();
        if let Some(s) = self.seed {
            set(&mut o, &["seed"], json!(s));
        }
        if let Some(p) = &self.out {
            set(&mut o, &["paths", "out"], json!(p));
        }
        let data_paths = |o: &mut Map<String, Value>, data: &Option<PathBuf>, root: &Option<PathBuf>| {
            if let Some(d) = data {
                set(o, &["paths", "dataset"], json!(d));
            }
            if let Some(r) = root {
                set(o, &["paths", "images"], json!(r));
            }
        };
        match &self.command {
            Command::Ingest(a) => {
                data_paths(&mut o, &a.input, &a.image_root);
                if a.strict_images {
                    set(&mut o, &["strict_images"], json!(true));
                }
            }
            Command::Train(a) => {
                data_paths(&mut o, &a.data, &a.image_root);
                if let Some(t) = a.task {
                    set(&mut o, &["train", "task"], json!(Task::from(t)));
                }
                if let Some(p) = a.preset {
                    set(&mut o, &["model", "preset"], json!(Preset::from(p)));
                }
                if let Some(v) = a.epochs {
                    set(&mut o, &["train", "epochs"], json!(v));
                }
                if let Some(v) = a.batch_size {
                    set(&mut o, &["train", "batch_size"], json!(v));
                }
                if let Some(v) = a.lr {
                    set(&mut o, &["train", "lr"], json!(v));
                }
                if let Some(v) = a.max_steps {
                    set(&mut o, &["train", "max_steps"], json!(v));
                }
            }
            Command::Evaluate(a) => data_paths(&mut o, &a.data, &a.image_root),
            Command::VisualizeAttention(a) => data_paths(&mut o, &a.data, &a.image_root),
            Command::ValidateAnnotations(_) | Command::GenFixtures(_) => {}
        }
        Value::Object(o)
    }
}

/// Runs a parsed command and maps the outcome to an exit code, printing
/// errors to stderr.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_nested_overrides() {
        let cli = Cli::parse_from([
            "docmsu", "--seed", "4", "train", "--task", "localize", "--preset", "test", "--epochs", "2", "--out", "o",
        ]);
        assert_eq!(
            cli.overrides(),
            json!({"seed": 4, "paths": {"out": "o"}, "train": {"task": "localize", "epochs": 2}, "model": {"preset": "test"}})
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 1);
    }
}
