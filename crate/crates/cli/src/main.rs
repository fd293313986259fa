use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use shapprof::pipeline::{Pipeline, PipelineConfig};

/// Topic-profile misclassification scoring for spam classifiers.
#[derive(Debug, Parser)]
#[command(name = "shapprof", version)]
struct Cli {
    /// JSON config; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for every artifact (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, split and vectorize the corpus.
    Prepare,
    /// Fit the classifier and predict every message.
    Train,
    /// Compute SHAP attributions and polarity supports.
    Explain,
    /// Fit topic models and reliable-group profiles.
    Profile,
    /// Score every message against its reference profile.
    Score,
    /// Detector AUROC/FRR and group divergences on the test split.
    Evaluate,
    /// Repair base-detector rejections.
    Repair,
    /// Render the markdown report and print it.
    Report,
    /// Every stage in order.
    Run,
}

impl Command {
    fn stage(&self) -> Option<&'static str> {
        Some(match self {
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Explain => "explain",
            Command::Profile => "profile",
            Command::Score => "score",
            Command::Evaluate => "evaluate",
            Command::Repair => "repair",
            Command::Report => "report",
            Command::Run => return None,
        })
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_STAGE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let mut cfg = match &cli.config {
        Some(p) => match PipelineConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                error!("bad config {}: {e}", p.display());
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => PipelineConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pipeline = match Pipeline::new(cfg) {
        Ok(p) => p,
        Err(e) => {
            error!("invalid config: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };

    let result = match cli.command.stage() {
        Some("report") => pipeline.report().map(|md| print!("{md}")),
        Some(stage) => pipeline.run_stage(stage),
        None => pipeline.run_all(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let s_msg = s.to_string();
                if !msg.contains(&s_msg) {
                    msg.push_str(&format!(": {s_msg}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
