use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use minidistill::bench::{run_bench, Arch, BenchOptions, ParamsReport};
use minidistill::checkpoint;
use minidistill::data::{corpus_sequences, synth_corpus, Vocab};
use minidistill::gradcheck::{self, Module, THRESHOLD};
use minidistill::losses::{DistillSpec, LossMode};
use minidistill::model::{ModelConfig, TransformerModel};
use minidistill::trainer::{
    pretrain_teacher, run_plan, DistillPlan, StepMetrics, TaChoice, TrainOptions,
};
use minidistill::{Error, Real};
use serde::Deserialize;

use crate::Command;

pub const DETERMINISTIC_ENV: &str = "MINIDISTILL_DETERMINISTIC";

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Json(_) | Error::Format(_) | Error::Checksum { .. } => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

/// Single-threaded 64-bit arithmetic when the environment asks for it.
fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

/// `run.ckpt` → `run.ckpt.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

struct MetricsFile {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsFile {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsFile {
            path,
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, m: &StepMetrics) -> minidistill::Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e).into())
    }
}

pub fn run(command: Command) -> CliResult<u8> {
    match command {
        Command::Pretrain {
            config,
            corpus,
            steps,
            seed,
            out,
        } => pretrain(&config, &corpus, steps, seed, &out),
        Command::Distill {
            teacher,
            corpus,
            student_layers,
            student_hidden,
            loss,
            ta,
            steps,
            seed,
            batch_size,
            lr,
            clip,
            student_dropout,
            out,
        } => {
            let mode: LossMode = loss.parse().map_err(|e: Error| usage(e.to_string()))?;
            let ta: TaChoice = ta.parse().map_err(|e: Error| usage(e.to_string()))?;
            let opts = TrainOptions {
                steps,
                batch_size,
                peak_lr: lr,
                clip_norm: (clip > 0.0).then_some(clip),
                seed,
                ..TrainOptions::default()
            };
            let args = DistillArgs {
                teacher,
                corpus,
                layers: student_layers,
                hidden: student_hidden,
                mode,
                ta,
                opts,
                student_dropout,
                out,
            };
            if deterministic() {
                distill::<f64>(&args)
            } else {
                distill::<f32>(&args)
            }
        }
        Command::Params {
            layers,
            hidden,
            vocab,
        } => {
            println!("{}", ParamsReport::new(layers, hidden, vocab)?);
            Ok(0)
        }
        Command::Bench {
            configs,
            seqlen,
            batches,
            batch_size,
        } => {
            let archs: Vec<Arch> = serde_json::from_str(&read_text(&configs)?)
                .map_err(|e| usage(format!("{}: {e}", configs.display())))?;
            let opts = BenchOptions {
                seq_len: seqlen,
                batches,
                batch_size,
                ..BenchOptions::default()
            };
            print!("{}", run_bench(&archs, &opts)?);
            Ok(0)
        }
        Command::Gradcheck { module, seed } => {
            let module: Module = module.parse().map_err(|e: Error| usage(e.to_string()))?;
            let report = gradcheck::run(&gradcheck::suite(module, seed)?, THRESHOLD);
            print!("{report}");
            if !report.all_passed() {
                eprintln!("failing checks: {}", report.failures().join(", "));
            }
            Ok(report.exit_code() as u8)
        }
        Command::Synth { docs, seed, out } => {
            fs::write(&out, synth_corpus(seed, docs)).map_err(|e| Error::io(&out, e))?;
            println!("wrote {docs} documents to {}", out.display());
            Ok(0)
        }
    }
}

/// Model section of a pretraining config; the vocabulary size comes from
/// the corpus.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    num_layers: usize,
    hidden: usize,
    heads: usize,
    max_seq_len: usize,
    #[serde(default)]
    ffn_dim: usize,
    #[serde(default = "default_dropout")]
    dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_max_vocab() -> usize {
    1000
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    model: ModelSection,
    #[serde(default = "default_max_vocab")]
    max_vocab: usize,
    #[serde(default)]
    train: TrainOptions,
}

fn pretrain(config: &Path, corpus: &Path, steps: Option<usize>, seed: Option<u64>, out: &Path) -> CliResult<u8> {
    let file: PretrainFile = serde_json::from_str(&read_text(config)?)
        .map_err(|e| usage(format!("{}: {e}", config.display())))?;
    let text = read_text(corpus)?;
    let vocab = Vocab::build(&text, file.max_vocab)?;
    let m = file.model;
    let model_config = ModelConfig {
        ffn_dim: m.ffn_dim,
        ..ModelConfig::new(m.num_layers, m.hidden, m.heads, vocab.len(), m.max_seq_len)
    }
    .with_dropout(m.dropout)
    .normalized();
    model_config.validate()?;
    let mut opts = file.train;
    if let Some(s) = steps {
        opts.steps = s;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    let sequences = corpus_sequences(&vocab, &text, model_config.max_seq_len.saturating_sub(2).max(1));
    if deterministic() {
        pretrain_typed::<f64>(&model_config, &sequences, &opts, &vocab, out)
    } else {
        pretrain_typed::<f32>(&model_config, &sequences, &opts, &vocab, out)
    }
}

fn pretrain_typed<T: Real>(
    config: &ModelConfig,
    sequences: &[Vec<usize>],
    opts: &TrainOptions,
    vocab: &Vocab,
    out: &Path,
) -> CliResult<u8> {
    let mut metrics = MetricsFile::create(sidecar(out, "metrics.jsonl"))?;
    let mut sink = |m: &StepMetrics| metrics.write(m);
    let (model, report) = pretrain_teacher::<T>(config, sequences, opts, Some(&mut sink))?;
    metrics.finish()?;
    checkpoint::save(&model, out)?;
    vocab.save(sidecar(out, "vocab"))?;
    let (first, last) = report.window_means(50).unwrap_or((f64::NAN, f64::NAN));
    println!(
        "pretrained {} for {} steps: loss {first:.4} -> {last:.4} (50-step windows), final masked accuracy {:.3}",
        config.label(),
        opts.steps,
        report.metrics.last().and_then(|m| m.mlm_acc).unwrap_or(f64::NAN)
    );
    println!("checkpoint {}", out.display());
    Ok(0)
}

struct DistillArgs {
    teacher: PathBuf,
    corpus: PathBuf,
    layers: usize,
    hidden: usize,
    mode: LossMode,
    ta: TaChoice,
    opts: TrainOptions,
    student_dropout: f64,
    out: PathBuf,
}

fn distill<T: Real>(args: &DistillArgs) -> CliResult<u8> {
    let teacher: TransformerModel<T> = checkpoint::load(&args.teacher)?;
    let vocab = Vocab::load(sidecar(&args.teacher, "vocab"))?;
    let plan = DistillPlan::build(
        teacher.config(),
        args.layers,
        args.hidden,
        &DistillSpec::new(args.mode),
        args.ta,
        &args.opts,
        args.student_dropout,
    )?;
    let text = read_text(&args.corpus)?;
    let sequences = corpus_sequences(&vocab, &text, teacher.config().max_seq_len.saturating_sub(2).max(1));
    println!("plan: {}", plan.describe());

    let last = plan.stages.len() - 1;
    let mut files = Vec::new();
    for i in 0..plan.stages.len() {
        let name = if i == last { "metrics.jsonl" } else { "assistant.metrics.jsonl" };
        files.push(MetricsFile::create(sidecar(&args.out, name))?);
    }
    let output = run_plan(&teacher, &plan, &sequences, &mut |i, m| files[i].write(m))?;
    for f in files {
        f.finish()?;
    }
    for (i, stage) in output.stages.iter().enumerate() {
        let path = if i == last {
            args.out.clone()
        } else {
            sidecar(&args.out, "assistant.ckpt")
        };
        checkpoint::save(&stage.output.student, &path)?;
    }
    vocab.save(sidecar(&args.out, "vocab"))?;

    println!(
        "{:<6} {:<10} {:<16} {:<16} {:>6} {:>14} {:>24}",
        "stage", "role", "teacher->student", "loss", "steps", "initial loss", "final loss"
    );
    for (i, s) in output.stages.iter().enumerate() {
        println!(
            "{:<6} {:<10} {:<16} {:<16} {:>6} {:>14.6} {:>24}",
            i + 1,
            s.role.to_string(),
            format!("{}->{}", s.teacher, s.student),
            s.mode.as_str(),
            s.steps,
            s.initial_loss,
            s.final_loss
        );
    }
    println!("checkpoint {}", args.out.display());
    Ok(0)
}
