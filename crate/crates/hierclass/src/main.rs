use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hierclass::commands::{
    cmd_evaluate, cmd_predict, cmd_tokenizer_train, cmd_train, load_run_config,
};
use hierclass::corpus::DataFormat;

/// Hierarchical two-stage text classifier: merge underrepresented labels,
/// separate the dominant class from the combined one, then recover the
/// original label inside the combined class.
#[derive(Parser)]
#[command(name = "hierclass", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the byte-level BPE tokenizer and write vocab.json + merges.txt.
    TokenizerTrain {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Train both classification stages; writes a checkpoint and accuracy
    /// curves into the configured output directory.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a labeled dataset; prints per-stage tables
    /// and writes a metrics file.
    Evaluate {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dataset to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// `csv` or `jsonl`; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<String>,
        /// Where to write the metrics document.
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Classify one text; prints a single JSON line with the label, the
    /// stage-1 probability and the stage-2 distribution when it ran.
    Predict {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text to classify.
        #[arg(long)]
        text: String,
    },
}

fn run(cli: Cli) -> hierclass::Result<()> {
    match cli.command {
        Command::TokenizerTrain { config } => {
            let config = load_run_config(&config)?;
            let dir = cmd_tokenizer_train(&config)?;
            println!(
                "tokenizer written to {} and {}",
                dir.join("vocab.json").display(),
                dir.join("merges.txt").display()
            );
        }
        Command::Train { config, seed } => {
            let mut config = load_run_config(&config)?;
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            let outputs = cmd_train(&config)?;
            println!(
                "stage 1: best epoch {} with test accuracy {:.4}",
                outputs.history1.best_epoch,
                outputs.history1.best_test_acc()
            );
            match &outputs.history2 {
                Some(history) => println!(
                    "stage 2: best epoch {} with test accuracy {:.4}",
                    history.best_epoch,
                    history.best_test_acc()
                ),
                None => println!("stage 2: skipped (single merged label)"),
            }
            println!("checkpoint written to {}", outputs.checkpoint_dir.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            format,
            out,
        } => {
            let format = format.map(|f| f.parse::<DataFormat>()).transpose()?;
            let (table, _) = cmd_evaluate(&checkpoint, &data, format, &out)?;
            print!("{table}");
            println!("metrics written to {}", out.display());
        }
        Command::Predict { checkpoint, text } => {
            let prediction = cmd_predict(&checkpoint, &text)?;
            println!(
                "{}",
                serde_json::to_string(&prediction).expect("prediction serializes")
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
