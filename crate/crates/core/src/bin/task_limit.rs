use std::io::{IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, ValueEnum};
use steering::bench::{
    bench_registry, emit_report, run_task_limit_on, BenchConfig, Engine,
    ExecutorChoice, QueueChoice, ReportFormat,
};
use steering::datafabric::DEFAULT_THRESHOLD_BYTES;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum QueueArg {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExecutorArg {
    Local,
    Remote,
}

/// Keeps a fixed number of sleep tasks in flight and reports how long each
/// completion takes to turn into the next task.
#[derive(Debug, Parser)]
#[command(name = "task-limit", version)]
struct Args {
    /// Tasks kept in flight.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Total tasks to run.
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    /// Mean task length in seconds.
    #[arg(long, default_value_t = 10.0)]
    mean_sleep: f64,
    /// Standard deviation of the task length in seconds.
    #[arg(long, default_value_t = 1.0)]
    std_sleep: f64,
    /// Input and output size of every task, in bytes.
    #[arg(long, default_value_t = 10_000_000)]
    payload: u64,
    #[arg(long, value_enum, default_value_t = QueueArg::Inproc)]
    queue: QueueArg,
    /// Values larger than this many bytes travel by reference; `off`
    /// disables proxying.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_BYTES.to_string())]
    proxy_threshold: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the report; a summary goes to stdout either way.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    #[arg(long, value_enum, default_value_t = ExecutorArg::Local)]
    executor: ExecutorArg,
    /// Address remote workers connect to.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
}

fn threshold(text: &str) -> anyhow::Result<Option<u64>> {
    match text {
        "off" => Ok(None),
        n => match n.parse() {
            Ok(v) => Ok(Some(v)),
            Err(_) => bail!("--proxy-threshold takes a byte count or `off`, not {n:?}"),
        },
    }
}

fn run(args: Args) -> anyhow::Result<bool> {
    let config = BenchConfig {
        workers: args.workers,
        total_tasks: args.tasks,
        mean_sleep_s: args.mean_sleep,
        std_sleep_s: args.std_sleep,
        payload_bytes: args.payload,
        queue: match args.queue {
            QueueArg::Inproc => QueueChoice::Inproc,
            QueueArg::Tcp => QueueChoice::Tcp,
        },
        proxy_threshold: threshold(&args.proxy_threshold)?,
        seed: args.seed,
        executor: match args.executor {
            ExecutorArg::Local => ExecutorChoice::Local,
            ExecutorArg::Remote => ExecutorChoice::Remote {
                listen: args.listen.clone(),
            },
        },
    };
    config.validate()?;
    let engine = Engine::start(&config.engine_options(), bench_registry())?;
    if let Some(addr) = engine.remote_addr() {
        eprintln!("listening for workers on {addr}");
        std::io::stderr().flush()?;
    }
    let report = run_task_limit_on(&config, engine)?;

    if let Some(path) = &args.report {
        let format = match args.format {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        };
        emit_report(&report, format, path)?;
    }
    let a = &report.aggregates;
    println!(
        "completed {}/{} tasks in {:.3} s ({:.2} tasks/s); mean reaction {:.6} s, decision {:.6} s, dispatch {:.6} s; redispatches {}",
        report.completed,
        report.config.total_tasks,
        report.elapsed_s,
        report.task_rate,
        a.reaction.mean,
        a.decision.mean,
        a.dispatch.mean,
        report.redispatches,
    );
    if let Some(why) = &report.aborted {
        eprintln!("run aborted: {why}");
        return Ok(false);
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("task-limit: {e:#}");
            ExitCode::from(2)
        }
    }
}
