use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kgret::data_synth::SynthConfig;
use kgret::encoders::FusionMode;
use kgret::knowledge_text::SelectionStrategy;
use kgret::pipeline::{self, KnowledgeSource, RunConfig};

/// Knowledge-augmented text-image retrieval.
#[derive(Parser, Debug)]
#[command(name = "kgret", version, about)]
struct Cli {
    /// TOML file with run settings; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine knowledge sentences for every caption and write them as JSONL.
    Extract(RunArgs),
    /// Train the encoders, writing checkpoints and a step log.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(RunArgs),
    /// Write a synthetic corpus with its knowledge graph.
    GenData(GenArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Dataset directory (manifest.json + images).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Knowledge TSV; repeat for several files.
    #[arg(long)]
    kg: Vec<PathBuf>,
    /// ConceptNet-style TSV; repeat for several files.
    #[arg(long)]
    conceptnet: Vec<PathBuf>,
    /// rskg, conceptnet, combined or none.
    #[arg(long)]
    source: Option<KnowledgeSource>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to evaluate (default: <out>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Triplets kept per caption.
    #[arg(long)]
    m: Option<usize>,
    /// random, relevance or diversity.
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    /// cross_attention, concat_only or no_knowledge.
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop training after this many steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Score the matching head only on each query's top-k candidates.
    #[arg(long)]
    top_k: Option<usize>,
    /// Write the text-to-image score matrix to this CSV.
    #[arg(long)]
    export_sim: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chance that a caption leaves out each scene object.
    #[arg(long, default_value_t = 0.5)]
    omit_prob: f64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn apply(mut c: RunConfig, a: RunArgs) -> RunConfig {
    macro_rules! set {
        ($($field:ident => $target:ident),* $(,)?) => {
            $(if let Some(v) = a.$field { c.$target = v; })*
        };
    }
    set!(
        data => data_dir, source => source, out => output_dir, m => m, strategy => strategy,
        w1 => w1, w2 => w2, fusion => fusion, epochs => epochs, batch => batch, lr => lr, seed => seed,
    );
    if !a.kg.is_empty() {
        c.kg = a.kg;
    }
    if !a.conceptnet.is_empty() {
        c.conceptnet = a.conceptnet;
    }
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint;
    }
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    if a.top_k.is_some() {
        c.top_k = a.top_k;
    }
    if a.export_sim.is_some() {
        c.export_sim = a.export_sim;
    }
    c
}

/// Prints a line, treating a closed pipe (`kgret eval | head`) as success.
fn emit(line: std::fmt::Arguments<'_>) -> Result<()> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let base = || load_config(cli.config.as_deref());
    match cli.command {
        Command::Extract(a) => {
            let config = apply(base()?, a);
            let path = pipeline::cmd_extract(&config).context("extract failed")?;
            emit(format_args!("wrote {}", path.display()))?;
        }
        Command::Train(a) => {
            let config = apply(base()?, a);
            let outcome = pipeline::cmd_train(&config).context("training failed")?;
            if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
                emit(format_args!(
                    "trained {} steps: loss {:.4} -> {:.4}, tau {:.4}",
                    outcome.log.len(),
                    first.total,
                    last.total,
                    outcome.model.tau()
                ))?;
            }
            emit(format_args!("wrote {}", config.output_dir.display()))?;
        }
        Command::Eval(a) => {
            let config = apply(base()?, a);
            let metrics = pipeline::cmd_eval(&config).context("evaluation failed")?;
            emit(format_args!("{}", metrics.to_json_line()))?;
        }
        Command::GenData(g) => {
            let synth = SynthConfig {
                n_images: g.n,
                seed: g.seed,
                omit_prob: g.omit_prob,
                image_size: g.image_size,
            };
            let manifest =
                pipeline::cmd_gen_data(&g.out, &synth).context("generating data failed")?;
            emit(format_args!(
                "wrote {} images to {}",
                manifest.entries.len(),
                g.out.display()
            ))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
