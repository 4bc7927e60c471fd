use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use styleqg::config::TrainerConfig;
use styleqg::pipeline::Workspace;
use styleqg::synth::SyntheticOracle;
use styleqg::{Error, Result};

/// Retrieval-augmented style-transfer question generation.
#[derive(Debug, Parser)]
#[command(name = "styleqg", version)]
struct Cli {
    /// Working directory holding the manifest and artifacts.
    #[arg(long, global = true, env = "RAST_DATA_DIR", default_value = ".")]
    workdir: PathBuf,
    /// TOML config file (flat keys; optional `preset`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given: squad, newsqa or desk.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Config override in `key=value` form; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/dev/test splits of the synthetic world.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Extract and deduplicate the template corpus.
    BuildCorpus {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Embed the corpus into a retrieval index.
    BuildIndex {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Directory containing a saved `retriever` checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised then RL training.
    Train,
    /// Top-N generation.
    Generate {
        /// Directory with vanilla/style/retriever checkpoints.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(short = 'n', long = "num")]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a generation dump.
    Evaluate {
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<TrainerConfig> {
    let base = match (&cli.config, &cli.preset) {
        (Some(path), _) => TrainerConfig::from_file(path)?,
        (None, Some(p)) => TrainerConfig::preset(p)?,
        (None, None) => TrainerConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml_string());
        return Ok(serde_json::Value::Null);
    }
    if let Command::Synth { seed: Some(s), .. } = cli.command {
        cfg.seed = s;
    }
    let mut ws = Workspace::open(&cli.workdir, cfg)?;
    let value = match cli.command {
        Command::ShowConfig => unreachable!(),
        Command::Synth {
            train,
            dev,
            test,
            out_dir,
            ..
        } => {
            let paths = ws.synth([train, dev, test], out_dir.as_deref())?;
            json!({"train": show(&paths[0]), "dev": show(&paths[1]), "test": show(&paths[2])})
        }
        Command::BuildCorpus {
            dataset,
            out,
            threshold,
        } => {
            let threshold = threshold.unwrap_or(ws.config.dedup_threshold);
            let (corpus, skipped) =
                ws.build_corpus(dataset.as_deref(), out.as_deref(), threshold)?;
            json!({"templates": corpus.len(), "skipped": skipped, "max_pairwise_jaccard": corpus.max_pairwise_jaccard()})
        }
        Command::BuildIndex {
            corpus,
            checkpoint,
            out,
        } => {
            let ckpt = checkpoint.as_deref().map(|d| (d, "retriever"));
            let index = ws.build_index(corpus.as_deref(), ckpt, out.as_deref())?;
            json!({"rows": index.len(), "dim": index.dim(), "encoder_version": index.encoder_version()})
        }
        Command::Train => {
            let qa = SyntheticOracle::new(ws.config.qa_epsilon);
            let best = ws.train(&qa)?;
            json!({"best_epoch": best})
        }
        Command::Generate {
            checkpoint,
            dataset,
            n,
            out,
        } => {
            let run = ws.generate(checkpoint.as_deref(), dataset.as_deref(), n, out.as_deref())?;
            json!({"samples": run.samples.len(), "questions": run.records.len()})
        }
        Command::Evaluate {
            outputs,
            dataset,
            out,
        } => {
            let report = ws.evaluate(outputs.as_deref(), dataset.as_deref(), out.as_deref())?;
            eprintln!("{report}");
            serde_json::to_value(&report).map_err(|e| Error::json("report", e))?
        }
    };
    Ok(value)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()})
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
