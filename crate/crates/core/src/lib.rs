//! Agent-based workflow steering with a pass-by-reference data fabric.
//!
//! A steering process ([`thinker`]) runs cooperating agents that submit
//! tasks and react to their completion. A task server ([`taskserver`])
//! executes them, locally or on remote workers. The two talk through
//! topic-partitioned [`queues`], while large values travel separately
//! through the [`datafabric`]. [`bench`] holds the task-limit latency
//! benchmark and a parallel Metropolis-Hastings sampler.

pub mod bench;
pub mod datafabric;
pub mod queues;
pub mod record;
pub mod taskserver;
pub mod thinker;
