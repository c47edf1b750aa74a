use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fairlens_core::generation::RetryPolicy;
use fairlens_core::pipeline::{self, PipelineError, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fairlens", version)]
#[command(about = "Audit text-to-image models for gender and skintone representation bias")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for training and generation; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for generation, labeling and feature extraction.
    #[arg(long, global = true)]
    parallelism: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prompt suite commands.
    Prompts {
        #[command(subcommand)]
        action: PromptsAction,
    },
    /// Generate images for the suite. Resumes where a previous run stopped.
    Generate {
        /// Only this model; all configured models when omitted.
        #[arg(long)]
        model: Option<String>,
    },
    /// Label generated images with gender and skintone.
    Label,
    /// Score labels against the suite and write evaluation.json.
    Evaluate,
    /// Write the CSV/JSON report and plots from evaluation.json.
    Report,
    /// Train the topology network and the thumbnail gender classifier.
    TrainTopology,
    /// Train the skintone fusion head on top of the topology network.
    TrainSkintone,
}

#[derive(Subcommand)]
enum PromptsAction {
    /// Build the prompt suite from the term lists.
    Build,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Self::Prompts { .. } => "prompts",
            Self::Generate { .. } => "generate",
            Self::Label => "label",
            Self::Evaluate => "evaluate",
            Self::Report => "report",
            Self::TrainTopology => "train-topology",
            Self::TrainSkintone => "train-skintone",
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    stage: &'a str,
    code: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

/// How a command finished when it did not fail outright.
enum Outcome {
    Done,
    Partial(String),
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(n) = cli.parallelism {
        cfg.parallelism = n;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).context("serializing command output")?);
    Ok(())
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Prompts { action: PromptsAction::Build } => {
            let (path, n) = pipeline::build_prompts(&cfg)?;
            print(&serde_json::json!({ "suite": path, "prompts": n }))?;
        }
        Command::Generate { model } => {
            let summaries = pipeline::generate_stage(&cfg, model.as_deref(), RetryPolicy::default())?;
            print(&summaries)?;
            let failed: usize = summaries.iter().map(|(_, s)| s.failed).sum();
            if failed > 0 {
                return Ok(Outcome::Partial(format!("{failed} generation requests failed after retries")));
            }
        }
        Command::Label => {
            let summaries = pipeline::label_stage(&cfg)?;
            print(&summaries)?;
            let failed: usize = summaries.iter().map(|(_, s)| s.failed).sum();
            if failed > 0 {
                return Ok(Outcome::Partial(format!("{failed} images could not be labeled")));
            }
        }
        Command::Evaluate => {
            let reports = pipeline::evaluate_stage(&cfg)?;
            let rows: Vec<_> = reports
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "model": r.model,
                        "bias_gender": r.bias_gender,
                        "bias_skintone": r.bias_skintone,
                        "error_gender": r.error_gender,
                        "error_skintone": r.error_skintone,
                        "overall_mean": r.overall_mean,
                    })
                })
                .collect();
            print(&serde_json::json!({ "evaluation": cfg.evaluation_path(), "models": rows }))?;
        }
        Command::Report => print(&pipeline::report_stage(&cfg)?)?,
        Command::TrainTopology => print(&pipeline::train_topology_stage(&cfg)?)?,
        Command::TrainSkintone => print(&pipeline::train_skintone_stage(&cfg)?)?,
    }
    Ok(Outcome::Done)
}

fn emit(report: &ErrorReport) {
    match serde_json::to_string(report) {
        Ok(line) => eprintln!("{line}"),
        Err(_) => eprintln!("{}", report.message),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(message)) => {
            emit(&ErrorReport { stage, code: "partial", message, path: None });
            ExitCode::from(4)
        }
        Err(err) => {
            let (code, exit, path) = match err.downcast_ref::<PipelineError>() {
                Some(p) => (p.code(), p.exit_code(), p.path().map(|p| p.display().to_string())),
                None => ("internal", 1, None),
            };
            emit(&ErrorReport { stage, code, message: format!("{err:#}"), path });
            ExitCode::from(exit as u8)
        }
    }
}
