mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qa2mn::QaError;

#[derive(Parser)]
#[command(name = "qa2mn", version, about = "Train and query a question-aware key-value memory network over a knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the graph embeddings alone.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training on a canonical dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `pretrain`, used instead of stage one.
        #[arg(long)]
        init_kge: Option<PathBuf>,
    },
    /// Hits@1 of a trained model on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, valid, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-question report; defaults to `eval-<split>.jsonl` in the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive question answering on stdin.
    Ask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kg: Option<PathBuf>,
    },
    /// Attention weights of one question as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kg: Option<PathBuf>,
        /// Question text.
        #[arg(long, conflicts_with = "id")]
        question: Option<String>,
        /// Question id, looked up in the dataset.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomly drop a fraction of the triples.
    MakeIncomplete {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a templated synthetic graph and dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        hops: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 8)]
        relations: usize,
        #[arg(long, default_value_t = 3)]
        out_degree: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Convert a PathQuestion or WorldCup2014 release to canonical files.
    Import {
        /// pq or wc.
        #[arg(long)]
        format: String,
        /// PathQuestion subset such as PQ-2H.
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat key=value file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_hops: Option<usize>,
    #[arg(long)]
    pub z_hops: Option<usize>,
    #[arg(long)]
    pub no_kge: bool,
    #[arg(long)]
    pub no_question_aware: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { config, kg, out } => commands::pretrain(&config, &kg, &out),
        Command::Train {
            config,
            kg,
            data,
            out,
            init_kge,
        } => commands::train(&config, &kg, &data, &out, init_kge.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            kg,
            data,
            out,
        } => commands::eval(&checkpoint, &split, kg.as_deref(), data.as_deref(), out.as_deref()),
        Command::Ask { checkpoint, kg } => commands::ask(&checkpoint, kg.as_deref()),
        Command::ExportAttention {
            checkpoint,
            kg,
            question,
            id,
            data,
            out,
        } => commands::export_attention(&checkpoint, kg.as_deref(), question, id, data.as_deref(), &out),
        Command::MakeIncomplete { kg, fraction, seed, out } => commands::make_incomplete(&kg, fraction, seed, &out),
        Command::Generate {
            out,
            hops,
            count,
            entities,
            relations,
            out_degree,
            seed,
        } => {
            let spec = qa2mn::dataio::SyntheticSpec {
                entities,
                relations,
                hops,
                count,
                seed,
                out_degree,
                unique_answers: false,
            };
            commands::generate(&spec, &out)
        }
        Command::Import {
            format,
            subset,
            src,
            out,
        } => commands::import(&format, subset.as_deref(), &src, &out),
    }
}

fn error_code(err: &anyhow::Error) -> (&'static str, u8) {
    match err.chain().find_map(|e| e.downcast_ref::<QaError>()) {
        Some(e @ (QaError::UnknownConfigKey(_) | QaError::InvalidConfig { .. })) => (e.code(), 2),
        Some(e) => (e.code(), 1),
        None => ("E_CLI", 1),
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, status) = error_code(&err);
            eprintln!("{code}: {}", one_line(&err));
            ExitCode::from(status)
        }
    }
}
