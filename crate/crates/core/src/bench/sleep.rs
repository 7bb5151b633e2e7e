use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, Context};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;

use crate::record::Value;
use crate::taskserver::MethodRegistration;

pub const SLEEP_TASK: &str = "sleep_task";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SleepParams {
    pub mean_s: f64,
    pub std_s: f64,
    pub output_bytes: u64,
    pub seed: u64,
    pub index: u64,
}

impl SleepParams {
    pub fn to_kwargs(self) -> BTreeMap<String, Value> {
        BTreeMap::from([
            ("mean_s".to_owned(), Value::Float(self.mean_s)),
            ("std_s".to_owned(), Value::Float(self.std_s)),
            ("output_bytes".to_owned(), Value::Int(self.output_bytes as i64)),
            ("seed".to_owned(), Value::Int(self.seed as i64)),
            ("index".to_owned(), Value::Int(self.index as i64)),
        ])
    }

    fn from_kwargs(kwargs: &BTreeMap<String, Value>) -> anyhow::Result<Self> {
        let float = |k: &str| {
            kwargs
                .get(k)
                .and_then(Value::as_f64)
                .with_context(|| format!("missing numeric kwarg {k:?}"))
        };
        let int = |k: &str| {
            kwargs
                .get(k)
                .and_then(Value::as_i64)
                .map(|i| i as u64)
                .with_context(|| format!("missing integer kwarg {k:?}"))
        };
        Ok(SleepParams {
            mean_s: float("mean_s")?,
            std_s: float("std_s")?,
            output_bytes: int("output_bytes")?,
            seed: int("seed")?,
            index: int("index")?,
        })
    }

    /// One generator per task: the run seed picks the key, the task index
    /// picks the stream.
    fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }
}

fn draw(params: &SleepParams, rng: &mut ChaCha20Rng) -> anyhow::Result<f64> {
    let normal = Normal::new(params.mean_s, params.std_s)
        .map_err(|e| anyhow!("bad sleep distribution: {e}"))?;
    Ok(rng.sample(normal).max(0.0))
}

/// The sleep a task with these parameters performs, in seconds.
pub fn sleep_duration(params: &SleepParams) -> anyhow::Result<f64> {
    draw(params, &mut params.rng())
}

/// The bytes a task with these parameters returns.
pub fn sleep_output(params: &SleepParams) -> anyhow::Result<Vec<u8>> {
    let mut rng = params.rng();
    draw(params, &mut rng)?;
    let mut out = vec![0; params.output_bytes as usize];
    rng.fill_bytes(&mut out);
    Ok(out)
}

/// Sleeps a truncated normal duration and returns pseudorandom bytes. The
/// input payload is only checked for presence.
pub fn sleep_task_method() -> MethodRegistration {
    MethodRegistration::new(SLEEP_TASK, |args, kwargs, _| {
        let params = SleepParams::from_kwargs(kwargs)?;
        if params.mean_s < 0.0 || params.std_s < 0.0 {
            anyhow::bail!("sleep parameters must be non-negative");
        }
        let input = args.first().and_then(Value::as_bytes).context("input payload missing")?;
        std::hint::black_box(input.len());
        let mut rng = params.rng();
        let seconds = draw(&params, &mut rng)?;
        thread::sleep(Duration::from_secs_f64(seconds));
        let mut out = vec![0; params.output_bytes as usize];
        rng.fill_bytes(&mut out);
        Ok(Value::Bytes(out))
    })
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use super::*;
    use crate::record::{new_task_request, TaskRequest, TaskStatus};
    use crate::taskserver::{execute_task, MethodRegistry, StateCache};
    use crate::datafabric::Resolver;

    fn params(mean_s: f64, std_s: f64, seed: u64, index: u64) -> SleepParams {
        SleepParams {
            mean_s,
            std_s,
            output_bytes: 1000,
            seed,
            index,
        }
    }

    fn run(p: SleepParams) -> crate::record::ResultRecord {
        let mut registry = MethodRegistry::default();
        registry.register(sleep_task_method()).unwrap();
        let mut req = TaskRequest::new(SLEEP_TASK).arg(vec![1u8; 16]);
        for (k, v) in p.to_kwargs() {
            req = req.kwarg(k, v);
        }
        let rec = new_task_request(req).unwrap();
        execute_task(&registry, rec, &StateCache::default(), &Resolver::new(0), "w")
    }

    #[test]
    fn zero_sleep_returns_exact_size() {
        let start = Instant::now();
        let r = run(params(0.0, 0.0, 1, 0));
        assert!(start.elapsed() < Duration::from_millis(50));
        assert_eq!(r.success, TaskStatus::Succeeded);
        assert_eq!(r.value.unwrap().as_bytes().unwrap().len(), 1000);
    }

    #[test]
    fn seeded_tasks_repeat_and_indices_differ() {
        let p = params(1.0, 0.5, 9, 3);
        assert_eq!(sleep_duration(&p).unwrap(), sleep_duration(&p).unwrap());
        assert_eq!(sleep_output(&p).unwrap(), sleep_output(&p).unwrap());
        assert_ne!(sleep_output(&p).unwrap(), sleep_output(&params(1.0, 0.5, 9, 4)).unwrap());
        let r = run(params(0.0, 0.0, 9, 3));
        assert_eq!(r.value.unwrap().as_bytes().unwrap(), sleep_output(&params(0.0, 0.0, 9, 3)).unwrap());
    }

    #[test]
    fn negative_draws_truncate_to_zero() {
        // A mean far below zero makes every draw negative.
        for index in 0..20 {
            assert_eq!(sleep_duration(&params(-0.3, 0.01, 5, index)).unwrap(), 0.0);
        }
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p = (0..)
            .map(|i| params(0.0, 1.0, 5, i))
            .find(|p| p.rng().sample(normal) < 0.0)
            .unwrap();
        assert_eq!(sleep_duration(&p).unwrap(), 0.0);
    }

    #[test]
    fn running_time_tracks_the_drawn_sleep() {
        let p = params(0.15, 0.0, 1, 0);
        let r = run(p);
        let expected = sleep_duration(&p).unwrap();
        assert!((r.time_costs.running_s - expected).abs() <= 0.2 * expected);
    }

    #[test]
    fn missing_input_is_a_task_error() {
        let mut registry = MethodRegistry::default();
        registry.register(sleep_task_method()).unwrap();
        let rec = new_task_request(TaskRequest::new(SLEEP_TASK)).unwrap();
        let r = execute_task(&registry, rec, &StateCache::default(), &Resolver::new(0), "w");
        assert_eq!(r.success, TaskStatus::Failed);
    }
}
