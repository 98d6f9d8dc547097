//! `matir`: build, search, evaluate, serve and inspect region indexes.
//!
//! Exit codes: 0 success, 2 user error, 3 backend failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Parser)]
#[command(name = "matir", version, about = "Mask-aware text-to-image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a region manifest and an embedding blob.
    BuildIndex(BuildIndexArgs),
    /// Search an index with a query embedding.
    Search(SearchArgs),
    /// Score a query set against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Print index statistics or one image's regions.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct BuildIndexArgs {
    /// Region manifest, one JSON object per line.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Little-endian f32 rows, one per region.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Backend endpoints and call policy shared by `search` and `evaluate`.
#[derive(Args, Clone)]
pub struct BackendArgs {
    /// Text embedder base URL.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Relevance scorer base URL; enables reranking.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Grounder base URL; requires --scorer.
    #[arg(long)]
    pub grounder: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_s: f64,
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
    /// Exit with a backend failure instead of degrading when a backend is down.
    #[arg(long)]
    pub fail_on_outage: bool,
    /// Prompt template with a `{}` placeholder; repeat for an ensemble.
    #[arg(long = "prompt-template")]
    pub prompt_templates: Vec<String>,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Raw little-endian f32 rows; several rows are ensembled.
    #[arg(long)]
    pub query_embedding: PathBuf,
    /// Object description sent to the scorer and grounder.
    #[arg(long)]
    pub query_text: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub nc: usize,
    #[arg(long, default_value_t = 50)]
    pub nk: usize,
    #[command(flatten)]
    pub backends: BackendArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Ground truth, one query per line.
    #[arg(long)]
    pub gt: PathBuf,
    /// Queries to run: one `{"query_id", "text", "embedding"?}` per line.
    #[arg(long, required_unless_present = "results", conflicts_with = "results")]
    pub queries: Option<PathBuf>,
    /// Score a pre-dumped results file instead of running queries.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Also write the rankings that were scored.
    #[arg(long)]
    pub dump_results: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub nc: usize,
    #[arg(long, default_value_t = 50)]
    pub nk: usize,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Args)]
pub struct ServeArgs {
    /// JSON service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long)]
    pub json: bool,
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(if matches!(cli.command, Command::Serve(_)) {
        "info"
    } else {
        "warn"
    });
    let result = match cli.command {
        Command::BuildIndex(a) => commands::build_index(&a),
        Command::Search(a) => commands::search(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
