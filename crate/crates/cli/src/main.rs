mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Pretrain tiny Transformer teachers and distill them into smaller students.
#[derive(Parser)]
#[command(name = "minidistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a teacher with masked language modeling.
    Pretrain {
        /// JSON file with `model`, optional `max_vocab` and `train` sections.
        #[arg(long)]
        config: PathBuf,
        /// Text corpus, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; vocabulary and metrics are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a teacher checkpoint into a smaller student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Text corpus, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        student_layers: usize,
        #[arg(long)]
        student_hidden: usize,
        /// minilm, att-only, soft-label, layer2layer, value-mse or hidden-relation.
        #[arg(long, default_value = "minilm")]
        loss: String,
        /// Teacher assistant: auto, off, or an explicit size such as 4x32.
        #[arg(long, default_value = "auto")]
        ta: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Global gradient-norm cap; 0 disables clipping.
        #[arg(long, default_value_t = 1.0)]
        clip: f64,
        /// Dropout rate for students and assistants.
        #[arg(long, default_value_t = 0.0)]
        student_dropout: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print embedding and Transformer parameter counts.
    Params {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        hidden: usize,
        #[arg(long, default_value_t = minidistill::bench::DEFAULT_VOCAB)]
        vocab: usize,
    },
    /// Time single-threaded forward passes for a list of architectures.
    Bench {
        /// JSON list of `{"layers": L, "hidden": D}` objects; the first is the reference.
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 128)]
        seqlen: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        /// all, ops, losses or model.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic corpus generated from a small grammar.
    Synth {
        #[arg(long, default_value_t = 5000)]
        docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
