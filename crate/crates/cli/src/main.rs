//! `recall` — train and inspect recall-probability models: ingest or
//! synthesize corpora, run the alternating trainer, evaluate models,
//! extract the fitted equation, and emit plot data.

mod commands;
mod config;
mod corpus;
mod equation_text;
mod svg;

use clap::{Parser, Subcommand};
use config::ParsedStrategy;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "recall", version, about = "Memory-behavior modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a delimited interaction log into a featurized corpus file.
    Ingest {
        /// Tab- or comma-separated log with a header row.
        #[arg(long)]
        input: PathBuf,
        /// Destination corpus file.
        #[arg(long)]
        out: PathBuf,
        /// Schema overrides as field=column pairs, comma separated.
        #[arg(long, default_value = "")]
        schema: String,
    },
    /// Generate a synthetic corpus plus its hidden ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Truth equation file; defaults to <out>.truth.
        #[arg(long)]
        truth_out: Option<PathBuf>,
        /// key=value overrides of config-file entries.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run the alternating trainer over a corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        /// Queue selection strategy: best, random, or direct.
        #[arg(long)]
        strategy: Option<ParsedStrategy>,
        /// Ablation: step both objectives jointly each epoch.
        #[arg(long)]
        no_alternate: bool,
        /// Ablation: bypass the buffer queue (direct replacement).
        #[arg(long)]
        no_queue: bool,
        /// Override the equation-residual weight.
        #[arg(long)]
        alpha: Option<f64>,
        /// key=value overrides of config-file entries.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Score a model on a corpus split.
    Eval {
        /// Checkpoint, equation file, or model manifest.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// train, validation, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Split seed; match the training seed to reproduce its split.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Split ratios as train,validation,test.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        /// Optional report file (TSV); always printed to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fitted equation with named, magnitude-sorted terms.
    Extract {
        /// Coefficient export or model manifest.
        #[arg(long)]
        model: PathBuf,
    },
    /// Emit plot data (CSV) plus an SVG rendering.
    Plot {
        /// kstudy, heatmap, or trace.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Trace log input (for --kind trace).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Learner id for kstudy (defaults to the first in the corpus).
        #[arg(long)]
        learner: Option<String>,
        #[arg(long, default_value_t = 30.0)]
        horizon_days: f64,
        #[arg(long, default_value_t = 1.0)]
        step_days: f64,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_svg: PathBuf,
    },
}

fn parse_ratios(spec: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        anyhow::bail!("--ratios expects three comma-separated numbers, got '{spec}'");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { input, out, schema } => commands::cmd_ingest(&input, &out, &schema),
        Command::Synth {
            config,
            out,
            truth_out,
            sets,
        } => commands::cmd_synth(&config, &out, truth_out.as_deref(), &sets),
        Command::Train {
            config,
            corpus,
            outdir,
            strategy,
            no_alternate,
            no_queue,
            alpha,
            sets,
        } => commands::cmd_train(
            &config,
            &corpus,
            &outdir,
            strategy.map(|s| s.0),
            no_alternate,
            no_queue,
            alpha,
            &sets,
        ),
        Command::Eval {
            model,
            corpus,
            split,
            seed,
            ratios,
            out,
        } => {
            let ratios = parse_ratios(&ratios)?;
            commands::cmd_eval(&model, &corpus, &split, seed, ratios, out.as_deref())
        }
        Command::Extract { model } => commands::cmd_extract(&model),
        Command::Plot {
            kind,
            model,
            corpus,
            input,
            learner,
            horizon_days,
            step_days,
            out_csv,
            out_svg,
        } => commands::cmd_plot(
            &kind,
            model.as_deref(),
            corpus.as_deref(),
            input.as_deref(),
            learner.as_deref(),
            horizon_days,
            step_days,
            &out_csv,
            &out_svg,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Single machine-parseable line; causes flattened into one.
            let chain: Vec<String> = err.chain().map(|c| c.to_string().replace('\n', "; ")).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
