//! `regen`: one entry point for the four pipeline phases plus evaluation,
//! benchmarking and reporting.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regen::error::RegenError;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "regen", version, about = "Teacher-to-student distillation for real-time image enhancement")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed propagated to every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Decode and check every image up front; treat skips as errors.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Output file or directory of the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Machine-readable diagnostics: one JSON object on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Match visually similar crops between a source and a target dataset.
    Patches(commands::PatchesArgs),
    /// Enhance a source dataset with a teacher and write the pair manifest.
    Pairs(commands::PairsArgs),
    /// Train the student on a pair manifest.
    Train(commands::TrainArgs),
    /// FID/KID between generated and reference image sets.
    Eval(commands::EvalArgs),
    /// Export a trained student to ONNX and check numerical parity.
    Export(commands::ExportArgs),
    /// Time inference of an exported graph, a checkpoint, or the oracle teacher.
    Bench(commands::BenchArgs),
    /// Compose bench and metric reports into the comparison table.
    Report(commands::ReportArgs),
}

fn error_kind(e: &RegenError) -> &'static str {
    match e {
        RegenError::Io { .. } => "io",
        RegenError::Decode { .. } | RegenError::Encode { .. } => "image",
        RegenError::Json { .. } | RegenError::Schema(_) => "schema",
        RegenError::Record { .. }
        | RegenError::DuplicateId { .. }
        | RegenError::MissingFile { .. }
        | RegenError::UnknownSplit { .. } => "manifest",
        RegenError::EmptyIntersection | RegenError::DimensionMismatch { .. } => "pairing",
        RegenError::Shape(_) | RegenError::InvalidArgument(_) => "invalid_argument",
        RegenError::Config { .. } => "config",
        RegenError::UnknownExtractor(_) => "unknown_extractor",
        RegenError::NonFiniteLoss { .. } => "non_finite_loss",
        RegenError::MatrixSqrt { .. } => "numerical",
        RegenError::DuplicateMethod(_) => "duplicate_method",
        RegenError::Runtime(_) => "runtime",
        RegenError::Checkpoint(_) => "checkpoint",
        RegenError::OutOfMemory { .. } => "out_of_memory",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let json_mode = cli.global.json;
    match commands::run(cli) {
        Ok(summary) => {
            if json_mode {
                println!("{}", json!({"status": "ok", "result": summary}));
            } else if let Some(text) = summary.get("text").and_then(|t| t.as_str()) {
                print!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, field) = match e.downcast_ref::<RegenError>() {
                Some(RegenError::Config { field, .. }) => ("config", Some(field.clone())),
                Some(r) => (error_kind(r), None),
                None => ("error", None),
            };
            if json_mode {
                println!(
                    "{}",
                    json!({"status": "error", "kind": kind, "field": field, "message": format!("{e:#}")})
                );
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
