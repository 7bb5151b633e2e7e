use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use super::{MethodRegistry, StateCache, WorkerContext};
use crate::datafabric::{FabricError, Resolver};
use crate::record::{FailureCategory, ResultRecord, TimestampEvent, Value};
use crate::thinker::panic_message;

fn resolve_deep(resolver: &Resolver, value: &Value) -> Result<Value, FabricError> {
    Ok(match value {
        Value::Proxy(p) => resolver.resolve_value(p)?,
        Value::List(items) => Value::List(
            items
                .iter()
                .map(|v| resolve_deep(resolver, v))
                .collect::<Result<_, _>>()?,
        ),
        Value::Map(map) => Value::Map(
            map.iter()
                .map(|(k, v)| Ok((k.clone(), resolve_deep(resolver, v)?)))
                .collect::<Result<_, FabricError>>()?,
        ),
        other => other.clone(),
    })
}

/// Runs one task: resolves proxied inputs, stamps compute start and end
/// around the method body, and fills in the value or the failure. The
/// record's own `args`/`kwargs` are left as they arrived, so proxies are
/// not inflated on the way back.
pub fn execute_task(
    registry: &MethodRegistry,
    mut record: ResultRecord,
    cache: &StateCache,
    resolver: &Resolver,
    worker_id: &str,
) -> ResultRecord {
    let Some(method) = registry.get(&record.method) else {
        let msg = format!("method {:?} is not registered", record.method);
        record.set_failure(FailureCategory::MethodNotFound, msg);
        return record;
    };

    let resolve_start = Instant::now();
    let inputs = record
        .args
        .iter()
        .map(|v| resolve_deep(resolver, v))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|args| {
            let kwargs = record
                .kwargs
                .iter()
                .map(|(k, v)| Ok((k.clone(), resolve_deep(resolver, v)?)))
                .collect::<Result<BTreeMap<_, _>, FabricError>>()?;
            Ok((args, kwargs))
        });
    record.time_costs.proxy_resolve_s += resolve_start.elapsed().as_secs_f64();
    let (args, kwargs) = match inputs {
        Ok(inputs) => inputs,
        Err(e) => {
            record.set_failure(FailureCategory::DataUnavailable, e.to_string());
            return record;
        }
    };

    // a retried task is stamped afresh
    record.timestamps.clear(TimestampEvent::ComputeStarted);
    record.timestamps.clear(TimestampEvent::ComputeEnded);
    let started = record
        .mark(TimestampEvent::ComputeStarted)
        .expect("compute_started was cleared");
    let outcome = {
        let ctx = WorkerContext {
            cache,
            worker_id,
            task_id: &record.task_id,
            task_info: &record.task_info,
        };
        catch_unwind(AssertUnwindSafe(|| (method.body)(&args, &kwargs, &ctx)))
    };
    let ended = record
        .mark(TimestampEvent::ComputeEnded)
        .expect("compute_ended was cleared");
    record.time_costs.running_s = (ended.mono - started.mono).max(0.0);

    match outcome {
        Ok(Ok(value)) => record.set_result(value),
        Ok(Err(e)) => record.set_failure(FailureCategory::TaskError, format!("{e:#}")),
        Err(panic) => record.set_failure(FailureCategory::TaskError, panic_message(panic.as_ref())),
    }
    record
}
