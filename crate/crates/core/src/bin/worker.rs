use std::io::IsTerminal;

use clap::Parser;
use steering::bench::bench_registry;
use steering::taskserver::{run_worker, WorkerOptions};

/// Remote execution worker for the benchmark methods.
#[derive(Debug, Parser)]
#[command(name = "worker", version)]
struct Args {
    /// Task server address, `host:port`.
    #[arg(long)]
    connect: String,
    #[arg(long, default_value_t = 1)]
    slots: usize,
    /// Worker identity; must be unique among connected workers.
    #[arg(long)]
    id: Option<String>,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let args = Args::parse();
    let id = args.id.unwrap_or_else(|| format!("worker-{}", std::process::id()));
    run_worker(&WorkerOptions::new(args.connect, id, args.slots), bench_registry())
}
