//! Acceptance criteria, run in order on one thread so timing-sensitive
//! checks do not compete with each other. Prints one PASS/FAIL line per
//! criterion. The target reports rather than gates: it exits nonzero on a
//! FAIL only when `ACCEPTANCE_STRICT=1` is set.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, ExitStatus, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use steering::bench::{
    bench_registry, check_constant_in_flight, discrete_chain, ks_two_sample, reference_mh_oracle,
    run_mh_sampler, BenchReport, Engine, EngineOptions, MhConfig, QueueChoice, Target,
};
use steering::thinker::ResourceCounter;

const TASK_LIMIT: &str = env!("CARGO_BIN_EXE_task-limit");
const WORKER: &str = env!("CARGO_BIN_EXE_worker");

/// A child process whose stderr lines arrive on a channel.
struct Proc {
    child: Child,
    lines: mpsc::Receiver<String>,
}

impl Proc {
    fn spawn(program: &str, args: &[&str]) -> Result<Proc> {
        let mut child = Command::new(program)
            .args(args)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .with_context(|| format!("spawning {program}"))?;
        let stderr = child.stderr.take().expect("piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Proc { child, lines })
    }

    /// Waits for a stderr line containing `needle` and returns it.
    fn expect_line(&self, needle: &str, timeout: Duration) -> Result<String> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left) {
                Ok(line) if line.contains(needle) => return Ok(line),
                Ok(_) => {}
                Err(_) => bail!("no line containing {needle:?} within {timeout:?}"),
            }
        }
    }

    fn wait(&mut self, timeout: Duration) -> Result<ExitStatus> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait()? {
                return Ok(status);
            }
            if Instant::now() >= deadline {
                let _ = self.child.kill();
                bail!("process did not exit within {timeout:?}");
            }
            thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn scratch() -> &'static Path {
    static DIR: std::sync::OnceLock<tempfile::TempDir> = std::sync::OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

fn report_path(name: &str) -> PathBuf {
    scratch().join(format!("{name}.json"))
}

fn load(path: &Path) -> Result<BenchReport> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Runs `task-limit` to completion, returning its report, exit status and
/// wall time.
fn task_limit(name: &str, args: &[&str]) -> Result<(BenchReport, ExitStatus, Duration)> {
    let path = report_path(name);
    let mut full: Vec<&str> = args.to_vec();
    let p = path.to_str().context("utf-8 temp path")?;
    full.extend(["--report", p, "--format", "json"]);
    let start = Instant::now();
    let status = Command::new(TASK_LIMIT)
        .args(&full)
        .stdout(Stdio::null())
        .status()?;
    let elapsed = start.elapsed();
    Ok((load(&path)?, status, elapsed))
}

fn criterion_1(queue: &str) -> Result<(String, BenchReport)> {
    let (report, status, elapsed) = task_limit(
        &format!("c1_{queue}"),
        &[
            "--workers", "4", "--tasks", "40", "--mean-sleep", "0.05", "--std-sleep", "0.005",
            "--payload", "1000", "--queue", queue,
        ],
    )?;
    ensure!(status.success(), "task-limit exited with {status}");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    ensure!(report.latencies.len() == 36, "{} latency rows", report.latencies.len());
    check_constant_in_flight(&report.in_flight, 4, 40).map_err(anyhow::Error::msg)?;
    Ok((
        format!(
            "{queue}: {:.2} s, 36 rows, in-flight 4 over {} trace events",
            elapsed.as_secs_f64(),
            report.in_flight.len()
        ),
        report,
    ))
}

fn criterion_2(report: &BenchReport) -> Result<String> {
    let mut worst = 0.0f64;
    for (i, row) in report.latencies.iter().enumerate() {
        ensure!(!row.latency.skew_clamped, "row {i} was skew-clamped");
        let err = (row.latency.total_s() - row.gap_s).abs();
        ensure!(err <= 1e-6, "row {i}: parts differ from gap by {err:e} s");
        worst = worst.max(err);
    }
    Ok(format!("{} rows, worst |sum - gap| = {worst:.2e} s", report.latencies.len()))
}

fn criterion_3(queue: &str) -> Result<String> {
    let common = [
        "--workers", "2", "--tasks", "10", "--mean-sleep", "1", "--std-sleep", "0.1",
        "--payload", "10000000", "--queue", queue,
    ];
    let with = |threshold: &str| {
        let mut args = common.to_vec();
        args.extend(["--proxy-threshold", threshold]);
        task_limit(&format!("c3_{queue}_{threshold}"), &args)
    };
    let (proxied, s1, _) = with("1000000")?;
    let (plain, s2, _) = with("off")?;
    ensure!(s1.success() && s2.success(), "runs exited with {s1} / {s2}");
    let (a, b) = (proxied.aggregates.reaction.mean, plain.aggregates.reaction.mean);
    ensure!(a < b, "proxied mean reaction {a:.6} s not below unproxied {b:.6} s");
    let size = proxied.sample_result_bytes.context("no result size recorded")?;
    ensure!(size < 10_000, "proxied record is {size} bytes");
    Ok(format!(
        "{queue}: mean reaction {:.2} ms proxied vs {:.2} ms plain; proxied record {size} B (plain {} B)",
        a * 1e3,
        b * 1e3,
        plain.sample_result_bytes.unwrap_or(0)
    ))
}

fn criterion_4(inproc: &[bool; 3]) -> Result<String> {
    let mut tcp = [false; 3];
    let mut notes = Vec::new();
    match criterion_1("tcp") {
        Ok((msg, report)) => {
            tcp[0] = true;
            notes.push(msg);
            match criterion_2(&report) {
                Ok(_) => tcp[1] = true,
                Err(e) => notes.push(format!("criterion 2 on tcp: {e:#}")),
            }
        }
        Err(e) => notes.push(format!("criterion 1 on tcp: {e:#}")),
    }
    match criterion_3("tcp") {
        Ok(msg) => {
            tcp[2] = true;
            notes.push(msg);
        }
        Err(e) => notes.push(format!("criterion 3 on tcp: {e:#}")),
    }
    ensure!(&tcp == inproc, "outcomes differ: inproc {inproc:?}, tcp {tcp:?}; {}", notes.join("; "));
    ensure!(tcp.iter().all(|&x| x), "{}", notes.join("; "));
    Ok(format!("criteria 1-3 pass on both queues; {}", notes.join("; ")))
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

fn criterion_5() -> Result<String> {
    let start = Instant::now();
    let config = |seed| MhConfig {
        walkers: 4,
        dim: 1,
        num_samples: 20_000,
        step_width: 2.0,
        target: Target::StandardNormal,
        seed,
    };
    let engine = Engine::start(&EngineOptions::local(QueueChoice::Inproc, 2), bench_registry())?;
    let driven = run_mh_sampler(&config(101), &engine)?;
    engine.shutdown()?;
    let oracle = reference_mh_oracle(&config(202))?;
    let flat = |s: Vec<Vec<f64>>| s.into_iter().skip(2_000).map(|x| x[0]).collect::<Vec<_>>();
    let (a, b) = (flat(driven), flat(oracle));
    let (ma, va) = moments(&a);
    let (mb, vb) = moments(&b);
    let ks = ks_two_sample(&a, &b);
    let elapsed = start.elapsed();
    let summary = format!(
        "engine mean {ma:+.4} var {va:.4}; oracle mean {mb:+.4} var {vb:.4}; KS {ks:.4}; {:.1} s",
        elapsed.as_secs_f64()
    );
    ensure!(ma.abs() <= 0.05 && mb.abs() <= 0.05, "mean out of range: {summary}");
    ensure!((va - 1.0).abs() <= 0.1 && (vb - 1.0).abs() <= 0.1, "variance out of range: {summary}");
    ensure!(ks <= 0.03, "KS too large: {summary}");
    ensure!(elapsed < Duration::from_secs(60), "too slow: {summary}");
    Ok(summary)
}

fn criterion_6() -> Result<String> {
    let start = Instant::now();
    let target = [0.2, 0.3, 0.5];
    let occ = discrete_chain(&target.map(f64::ln), 100_000, 6);
    let elapsed = start.elapsed();
    for (o, p) in occ.iter().zip(target) {
        ensure!((o - p).abs() <= 0.02, "occupancy {occ:?}");
    }
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("occupancy {:.4} {:.4} {:.4} in {:.3} s", occ[0], occ[1], occ[2], elapsed.as_secs_f64()))
}

/// Starts `task-limit` with a remote executor and returns it with the
/// worker address it printed.
fn remote_run(name: &str, tasks: &str) -> Result<(Proc, String, PathBuf)> {
    let path = report_path(name);
    let p = path.to_str().context("utf-8 temp path")?.to_owned();
    let run = Proc::spawn(
        TASK_LIMIT,
        &[
            "--workers", "1", "--tasks", tasks, "--mean-sleep", "2", "--std-sleep", "0",
            "--payload", "1000", "--executor", "remote", "--listen", "127.0.0.1:0",
            "--report", &p,
        ],
    )?;
    let line = run.expect_line("listening for workers on", Duration::from_secs(20))?;
    let addr = line.rsplit(' ').next().context("address missing")?.to_owned();
    Ok((run, addr, path))
}

/// Starts a worker and waits until it holds a task part-way through.
fn worker_mid_task(addr: &str, id: &str) -> Result<Proc> {
    let w = Proc::spawn(WORKER, &["--connect", addr, "--id", id, "--slots", "1"])?;
    w.expect_line("registered", Duration::from_secs(20))?;
    thread::sleep(Duration::from_millis(700));
    Ok(w)
}

fn criterion_7() -> Result<String> {
    // One kill: the task is redispatched to a second worker and the run
    // drains cleanly.
    let (mut run, addr, path) = remote_run("c7_once", "3")?;
    let mut first = worker_mid_task(&addr, "w1")?;
    first.child.kill()?;
    first.child.wait()?;
    let mut second = Proc::spawn(WORKER, &["--connect", &addr, "--id", "w2", "--slots", "1"])?;
    let status = run.wait(Duration::from_secs(60))?;
    let report = load(&path)?;
    ensure!(status.success(), "single-kill run exited with {status}: {:?}", report.aborted);
    ensure!(report.redispatches == 1, "{} redispatches", report.redispatches);
    ensure!(report.completed == 3 && report.failures.is_empty(), "unclean drain: {:?}", report.failures);
    let worker_status = second.wait(Duration::from_secs(20))?;
    ensure!(worker_status.success(), "surviving worker exited with {worker_status}");

    // Two kills of the same task: it fails as worker-lost and the run
    // exits nonzero.
    let (mut run, addr, path) = remote_run("c7_twice", "3")?;
    for id in ["w3", "w4"] {
        let mut w = worker_mid_task(&addr, id)?;
        w.child.kill()?;
        w.child.wait()?;
    }
    let status = run.wait(Duration::from_secs(60))?;
    let report = load(&path)?;
    ensure!(!status.success(), "double-kill run exited successfully");
    ensure!(report.failures.len() == 1, "{} failed records", report.failures.len());
    ensure!(
        report.failures[0].category == "worker-lost",
        "failure category {}",
        report.failures[0].category
    );
    Ok(format!(
        "single kill: 1 redispatch, 3/3 completed, exit 0; double kill: worker-lost, exit {}",
        status.code().map_or("signal".into(), |c| c.to_string())
    ))
}

fn criterion_8() -> Result<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(resource_stress());
    });
    rx.recv_timeout(Duration::from_secs(30))
        .map_err(|_| anyhow::anyhow!("not finished within 30 s (deadlock?)"))?
}

fn resource_stress() -> Result<String> {
    use rand::{Rng, SeedableRng};
    const POOLS: [&str; 3] = ["a", "b", "c"];
    let counter = Arc::new(ResourceCounter::new(POOLS.map(|p| (p, 12))));
    let start = Instant::now();
    let violations = thread::scope(|s| {
        let handles: Vec<_> = (0..8u64)
            .map(|t| {
                let counter = Arc::clone(&counter);
                s.spawn(move || {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(t);
                    let mut held = [0u64; 3];
                    let mut bad = 0;
                    for _ in 0..10_000 {
                        let p = rng.gen_range(0..3);
                        let n = rng.gen_range(1..=2);
                        let wait = Some(Duration::from_micros(200));
                        match rng.gen_range(0..3) {
                            0 => {
                                if counter.allocate(POOLS[p], n, wait).unwrap() {
                                    held[p] += n;
                                }
                            }
                            1 if held[p] >= n => {
                                counter.release(POOLS[p], n).unwrap();
                                held[p] -= n;
                            }
                            _ => {
                                let q = rng.gen_range(0..3);
                                counter.reallocate(POOLS[p], POOLS[q], n, wait).unwrap();
                            }
                        }
                        let levels = counter.snapshot();
                        let total: u64 = levels.values().map(|l| l.total).sum();
                        if total != 36 || levels.values().any(|l| l.available > l.total) {
                            bad += 1;
                        }
                    }
                    for (p, n) in held.into_iter().enumerate() {
                        if n > 0 {
                            counter.release(POOLS[p], n).unwrap();
                        }
                    }
                    bad
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum::<usize>()
    });
    ensure!(violations == 0, "{violations} invariant violations");
    let levels = counter.snapshot();
    ensure!(levels.values().all(|l| l.available == l.total), "slots leaked: {levels:?}");
    Ok(format!(
        "80,000 operations in {:.2} s, totals constant at 36",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_9() -> Result<String> {
    // The large-task shape: 10 MB payloads, 10 s mean, 1 s deviation, with
    // two workers instead of a full machine.
    let (report, status, _) = task_limit("c9", &["--workers", "2", "--tasks", "4"])?;
    ensure!(status.success(), "exited with {status}");
    ensure!(report.v == 1, "report version {}", report.v);
    ensure!(
        report.config.payload_bytes == 10_000_000
            && report.config.mean_sleep_s == 10.0
            && report.config.std_sleep_s == 1.0,
        "defaults changed: {:?}",
        report.config
    );
    ensure!(report.latencies.len() == 2, "{} rows", report.latencies.len());
    Ok(format!(
        "same report schema; {:.3} tasks/s at 2 workers (no tolerance asserted)",
        report.task_rate
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Result<String>)> = Vec::new();

    let c1 = criterion_1("inproc");
    let c2 = match &c1 {
        Ok((_, report)) => criterion_2(report),
        Err(_) => Err(anyhow::anyhow!("criterion 1 produced no report")),
    };
    let c3 = criterion_3("inproc");
    let outcomes = [c1.is_ok(), c2.is_ok(), c3.is_ok()];
    results.push((1, "constant in-flight", c1.map(|(m, _)| m)));
    results.push((2, "latency decomposition", c2));
    results.push((3, "proxy benefit direction", c3));
    results.push((4, "queue interchangeability", criterion_4(&outcomes)));
    results.push((5, "MH statistical equivalence", criterion_5()));
    results.push((6, "discrete detailed balance", criterion_6()));
    results.push((7, "remote fault handling", criterion_7()));
    results.push((8, "resource counter stress", criterion_8()));
    results.push((9, "large-task configuration shape", criterion_9()));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(e) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {e:#}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
