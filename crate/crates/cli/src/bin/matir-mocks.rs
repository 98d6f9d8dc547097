//! `matir-mocks`: serve the embedder, scorer and grounder protocols from a
//! JSON mock spec.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use matir_core::mock::MockSpec;

#[derive(Parser)]
#[command(
    name = "matir-mocks",
    version,
    about = "Deterministic mock model backends"
)]
struct Args {
    /// Mock spec (JSON). Without one every scorer answer is "irrelevant" and
    /// grounder answers are empty.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:9000")]
    listen: String,
}

fn load(path: &PathBuf) -> Result<MockSpec, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .init();
    let spec = match args.spec.as_ref().map(load).transpose() {
        Ok(s) => s.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    rt.block_on(async {
        let running = match matir_server::serve_mocks(spec, &args.listen).await {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {}: {e}", args.listen);
                return ExitCode::from(2);
            }
        };
        println!("listening on {}", running.url());
        let _ = tokio::signal::ctrl_c().await;
        ExitCode::SUCCESS
    })
}
