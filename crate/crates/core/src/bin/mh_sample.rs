use std::io::IsTerminal;
use std::path::PathBuf;

use clap::Parser;
use steering::bench::{
    bench_registry, run_mh_sampler, Engine, EngineOptions, MhConfig, QueueChoice, Target,
};

/// Parallel Metropolis-Hastings over a standard normal target, one
/// log-density task per walker step.
#[derive(Debug, Parser)]
#[command(name = "mh-sample", version)]
struct Args {
    #[arg(long, default_value_t = 8)]
    walkers: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Half-width of the uniform proposal.
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Execution slots evaluating log-densities.
    #[arg(long, default_value_t = 1)]
    slots: usize,
    /// CSV output, one sample per row.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let args = Args::parse();
    let config = MhConfig {
        walkers: args.walkers,
        dim: args.dim,
        num_samples: args.samples,
        step_width: args.step,
        target: Target::StandardNormal,
        seed: args.seed,
    };
    config.validate()?;
    let engine = Engine::start(&EngineOptions::local(QueueChoice::Inproc, args.slots), bench_registry())?;
    let samples = run_mh_sampler(&config, &engine)?;
    engine.shutdown()?;

    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record((0..config.dim).map(|i| format!("x{i}")))?;
    for s in &samples {
        w.write_record(s.iter().map(f64::to_string))?;
    }
    w.flush()?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}
