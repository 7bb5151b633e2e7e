use std::f64::consts::PI;
use std::sync::Arc;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{BenchError, Engine};
use crate::record::{ResultRecord, TaskRequest, TaskStatus, Value, DEFAULT_TOPIC};
use crate::taskserver::MethodRegistration;
use crate::thinker::{AgentSpec, ResourceCounter, Thinker, ThinkerContext};

pub const COMPUTE_LOGP: &str = "compute_logp";

/// Log-density of the standard normal in `x.len()` dimensions.
pub fn log_prob_gaussian(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * (sq + x.len() as f64 * (2.0 * PI).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    StandardNormal,
}

impl Target {
    fn name(self) -> &'static str {
        match self {
            Target::StandardNormal => "standard_normal",
        }
    }

    fn log_prob(self, x: &[f64]) -> f64 {
        match self {
            Target::StandardNormal => log_prob_gaussian(x),
        }
    }
}

/// Evaluates a target log-density at `args[0]`; the target is named by the
/// `target` kwarg and defaults to the standard normal.
pub fn compute_logp_method() -> MethodRegistration {
    MethodRegistration::new(COMPUTE_LOGP, |args, kwargs, _| {
        let x = args
            .first()
            .and_then(Value::to_f64_vec)
            .context("expected a position vector")?;
        let target = match kwargs.get("target").and_then(Value::as_str) {
            None | Some("standard_normal") => Target::StandardNormal,
            Some(other) => anyhow::bail!("unknown target {other:?}"),
        };
        Ok(Value::Float(target.log_prob(&x)))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    pub walkers: usize,
    pub dim: usize,
    pub num_samples: usize,
    /// Half-width of the uniform proposal in each coordinate.
    pub step_width: f64,
    pub target: Target,
    pub seed: u64,
}

impl Default for MhConfig {
    fn default() -> Self {
        MhConfig {
            walkers: 8,
            dim: 8,
            num_samples: 256,
            step_width: 1.0,
            target: Target::StandardNormal,
            seed: 0,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.walkers == 0 || self.dim == 0 || self.num_samples == 0 {
            return Err(BenchError::Config("walkers, dim and num_samples must be positive".into()));
        }
        if !(self.step_width.is_finite() && self.step_width >= 0.0) {
            return Err(BenchError::Config("step_width must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Walker {
    position: Vec<f64>,
    log_p: f64,
    proposal: Vec<f64>,
}

/// The arithmetic both samplers share. Random numbers are drawn in a fixed
/// order (initial positions walker by walker, then per step one uniform
/// for acceptance followed by the proposal) so a serial engine run and
/// the oracle consume the stream identically.
struct Chain {
    rng: ChaCha20Rng,
    walkers: Vec<Walker>,
    samples: Vec<Vec<f64>>,
    step_width: f64,
    wanted: usize,
}

impl Chain {
    fn new(config: &MhConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let walkers = (0..config.walkers)
            .map(|_| {
                let start: Vec<f64> = (0..config.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                Walker {
                    position: start.clone(),
                    log_p: f64::NEG_INFINITY,
                    proposal: start,
                }
            })
            .collect();
        Chain {
            rng,
            walkers,
            samples: Vec::with_capacity(config.num_samples),
            step_width: config.step_width,
            wanted: config.num_samples,
        }
    }

    /// Accepts or rejects walker `i`'s pending proposal given its
    /// log-density, records a sample, and returns the next proposal if more
    /// samples are needed.
    fn step(&mut self, i: usize, new_log_p: f64) -> Option<Vec<f64>> {
        let u: f64 = self.rng.gen();
        let w = &mut self.walkers[i];
        // Starting from -inf the first evaluation is always accepted.
        if u < (new_log_p - w.log_p).exp() {
            w.position = std::mem::take(&mut w.proposal);
            w.log_p = new_log_p;
        }
        self.samples.push(w.position.clone());
        if self.samples.len() >= self.wanted {
            return None;
        }
        let width = self.step_width;
        let rng = &mut self.rng;
        w.proposal = w
            .position
            .iter()
            .map(|x| if width > 0.0 { x + rng.gen_range(-width..=width) } else { *x })
            .collect();
        Some(w.proposal.clone())
    }
}

fn submit(ctx: &ThinkerContext<Chain>, target: Target, walker: usize, x: &[f64]) -> anyhow::Result<()> {
    let request = TaskRequest::new(COMPUTE_LOGP)
        .arg(Value::floats(x))
        .kwarg("target", target.name())
        .info("walker", walker as i64);
    ctx.queues().send_inputs(request)?;
    Ok(())
}

fn walker_of(record: &ResultRecord) -> anyhow::Result<usize> {
    record
        .task_info
        .get("walker")
        .and_then(Value::as_i64)
        .map(|i| i as usize)
        .context("result lost its walker index")
}

/// Parallel Metropolis-Hastings: one log-density task per walker is kept in
/// flight on `engine`, and every completion advances that walker by one
/// step. Returns samples in the order the steering side recorded them.
pub fn run_mh_sampler(config: &MhConfig, engine: &Engine) -> Result<Vec<Vec<f64>>, BenchError> {
    config.validate()?;
    let target = config.target;
    let mut thinker = Thinker::new(
        engine.queues().clone(),
        Arc::new(ResourceCounter::new(std::iter::empty::<(String, u64)>())),
        Chain::new(config),
    );
    thinker.register_agent(AgentSpec::startup("start_walkers", move |ctx: &ThinkerContext<Chain>| {
        let starts: Vec<Vec<f64>> = ctx.state().walkers.iter().map(|w| w.proposal.clone()).collect();
        for (i, x) in starts.iter().enumerate() {
            submit(ctx, target, i, x)?;
        }
        Ok(())
    }))?;
    thinker.register_agent(AgentSpec::result_processor(
        "step",
        DEFAULT_TOPIC,
        move |ctx: &ThinkerContext<Chain>, record| {
            if record.success != TaskStatus::Succeeded {
                let why = record.failure_info.map(|f| f.message).unwrap_or_default();
                anyhow::bail!("log-density task failed: {why}");
            }
            let i = walker_of(&record)?;
            let log_p = record
                .value
                .as_ref()
                .and_then(Value::as_f64)
                .context("log-density result is not a number")?;
            let next = ctx.state().step(i, log_p);
            match next {
                Some(x) => submit(ctx, target, i, &x)?,
                None => ctx.set_done(),
            }
            Ok(())
        },
    ))?;
    thinker.run()?;
    let chain = thinker
        .into_state()
        .map_err(|_| BenchError::Config("thinker state still shared".into()))?;
    Ok(chain.samples)
}

/// Single-context reference sampler: walkers advance round-robin with the
/// same proposal and acceptance arithmetic as [`run_mh_sampler`].
pub fn reference_mh_oracle(config: &MhConfig) -> Result<Vec<Vec<f64>>, BenchError> {
    config.validate()?;
    let mut chain = Chain::new(config);
    let mut pending: Vec<f64> = chain
        .walkers
        .iter()
        .map(|w| config.target.log_prob(&w.proposal))
        .collect();
    'outer: loop {
        for (i, lp) in pending.iter_mut().enumerate() {
            match chain.step(i, *lp) {
                Some(x) => *lp = config.target.log_prob(&x),
                None => break 'outer,
            }
        }
    }
    Ok(chain.samples)
}

/// Brute-force Metropolis chain over a finite state space with a
/// symmetric proposal (uniform over the other states). Returns the
/// fraction of steps spent in each state.
pub fn discrete_chain(log_probs: &[f64], steps: usize, seed: u64) -> Vec<f64> {
    let n = log_probs.len();
    let mut counts = vec![0usize; n];
    if n == 0 || steps == 0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut state = 0;
    for _ in 0..steps {
        if n > 1 {
            let mut proposal = rng.gen_range(0..n - 1);
            if proposal >= state {
                proposal += 1;
            }
            if rng.gen::<f64>() < (log_probs[proposal] - log_probs[state]).exp() {
                state = proposal;
            }
        }
        counts[state] += 1;
    }
    counts.into_iter().map(|c| c as f64 / steps as f64).collect()
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// empirical distribution functions of `a` and `b`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
