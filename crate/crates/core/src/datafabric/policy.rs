//! Size-threshold auto-proxying applied by the queues.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    payload_size, proxy_value, FabricError, Resolver, StoreHandle, StoreKind,
    DEFAULT_THRESHOLD_BYTES,
};
use crate::record::{ResultRecord, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliesTo {
    Args,
    Results,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyStage {
    Inputs,
    Result,
}

impl AppliesTo {
    pub fn covers(self, stage: ProxyStage) -> bool {
        matches!(
            (self, stage),
            (AppliesTo::Both, _)
                | (AppliesTo::Args, ProxyStage::Inputs)
                | (AppliesTo::Results, ProxyStage::Result)
        )
    }
}

/// Replace values larger than `threshold_bytes` with proxies in `store`.
#[derive(Clone)]
pub struct ThresholdPolicy {
    pub threshold_bytes: u64,
    pub store: StoreHandle,
    pub applies_to: AppliesTo,
}

impl std::fmt::Debug for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThresholdPolicy")
            .field("threshold_bytes", &self.threshold_bytes)
            .field("store", &self.store.locator())
            .field("applies_to", &self.applies_to)
            .finish()
    }
}

/// Serializable form of a policy, so another process can reconnect to the
/// same store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDescriptor {
    pub threshold_bytes: u64,
    pub store_kind: StoreKind,
    pub locator: String,
    pub applies_to: AppliesTo,
}

impl ThresholdPolicy {
    pub fn new(store: StoreHandle, threshold_bytes: u64) -> Result<Self, FabricError> {
        if threshold_bytes == 0 {
            return Err(FabricError::Payload("threshold must be at least 1 byte".into()));
        }
        Resolver::global().register(Arc::clone(&store));
        Ok(ThresholdPolicy {
            threshold_bytes,
            store,
            applies_to: AppliesTo::Both,
        })
    }

    pub fn with_default_threshold(store: StoreHandle) -> Result<Self, FabricError> {
        Self::new(store, DEFAULT_THRESHOLD_BYTES)
    }

    pub fn applies_to(mut self, applies_to: AppliesTo) -> Self {
        self.applies_to = applies_to;
        self
    }

    pub fn descriptor(&self) -> PolicyDescriptor {
        PolicyDescriptor {
            threshold_bytes: self.threshold_bytes,
            store_kind: self.store.kind(),
            locator: self.store.locator(),
            applies_to: self.applies_to,
        }
    }

    pub fn from_descriptor(desc: &PolicyDescriptor) -> Result<Self, FabricError> {
        let store = Resolver::global().store_for(desc.store_kind, &desc.locator)?;
        Ok(Self::new(store, desc.threshold_bytes)?.applies_to(desc.applies_to))
    }

    fn maybe_proxy(&self, value: &mut Value) -> Result<bool, FabricError> {
        if value.is_proxy() || payload_size(value)? <= self.threshold_bytes {
            return Ok(false);
        }
        let proxy = proxy_value(self.store.as_ref(), value)?;
        *value = Value::Proxy(proxy);
        Ok(true)
    }

    /// Proxies oversized top-level values of `record` in place and returns
    /// how many were replaced. A stage the policy does not cover is left
    /// untouched.
    pub fn apply(&self, record: &mut ResultRecord, stage: ProxyStage) -> Result<usize, FabricError> {
        if !self.applies_to.covers(stage) {
            return Ok(0);
        }
        let mut replaced = 0;
        match stage {
            ProxyStage::Inputs => {
                for v in record.args.iter_mut().chain(record.kwargs.values_mut()) {
                    replaced += usize::from(self.maybe_proxy(v)?);
                }
            }
            ProxyStage::Result => {
                if let Some(v) = record.value.as_mut() {
                    replaced += usize::from(self.maybe_proxy(v)?);
                }
            }
        }
        Ok(replaced)
    }
}

pub fn apply_policy(
    policy: &ThresholdPolicy,
    mut record: ResultRecord,
    stage: ProxyStage,
) -> Result<ResultRecord, FabricError> {
    policy.apply(&mut record, stage)?;
    Ok(record)
}
