//! Bookkeeping for eager evaluation: computations on a batch start before
//! its authentication finishes, so their outputs are held back until the
//! verdict arrives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchState {
    Tentative,
    Committed,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthOutcome {
    Ok,
    Fail,
}

/// What a failed authentication does to the rest of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Only the failing batch is abandoned.
    #[default]
    Isolate,
    /// The failing batch and every later batch are abandoned, including
    /// later batches that had already been verified.
    EpochAbort,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("batch {batch_id} was already resolved as {state:?}")]
    DoubleResolve { batch_id: u64, state: BatchState },
    #[error("batch {0} is not in the ledger")]
    UnknownBatch(u64),
    #[error("batch {0} is already in the ledger")]
    DuplicateBatch(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    state: BatchState,
    output: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EagerLedger {
    policy: FailurePolicy,
    batches: BTreeMap<u64, Entry>,
    /// First batch of an aborted epoch tail.
    aborted_from: Option<u64>,
}

impl EagerLedger {
    pub fn new(policy: FailurePolicy) -> Self {
        Self { policy, ..Self::default() }
    }

    pub fn policy(&self) -> FailurePolicy {
        self.policy
    }

    /// Registers a batch whose computation is starting ahead of its
    /// authentication. In an aborted epoch tail it is abandoned at once.
    pub fn begin(&mut self, batch_id: u64) -> Result<(), LedgerError> {
        if self.batches.contains_key(&batch_id) {
            return Err(LedgerError::DuplicateBatch(batch_id));
        }
        let state = match self.aborted_from {
            Some(from) if batch_id >= from => BatchState::Abandoned,
            _ => BatchState::Tentative,
        };
        self.batches.insert(batch_id, Entry { state, output: Vec::new() });
        Ok(())
    }

    /// Buffers output produced from a batch. Output of an abandoned batch is
    /// dropped on the floor.
    pub fn buffer(&mut self, batch_id: u64, bytes: &[u8]) -> Result<(), LedgerError> {
        let entry = self.batches.get_mut(&batch_id).ok_or(LedgerError::UnknownBatch(batch_id))?;
        if entry.state != BatchState::Abandoned {
            entry.output.extend_from_slice(bytes);
        }
        Ok(())
    }

    pub fn resolve(&mut self, batch_id: u64, outcome: AuthOutcome) -> Result<(), LedgerError> {
        let entry = self.batches.get_mut(&batch_id).ok_or(LedgerError::UnknownBatch(batch_id))?;
        if entry.state != BatchState::Tentative {
            return Err(LedgerError::DoubleResolve { batch_id, state: entry.state });
        }
        match outcome {
            AuthOutcome::Ok => entry.state = BatchState::Committed,
            AuthOutcome::Fail => {
                abandon(entry);
                if self.policy == FailurePolicy::EpochAbort {
                    self.aborted_from = Some(self.aborted_from.map_or(batch_id, |f| f.min(batch_id)));
                    for (_, later) in self.batches.range_mut(batch_id..) {
                        abandon(later);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn state(&self, batch_id: u64) -> Option<BatchState> {
        self.batches.get(&batch_id).map(|e| e.state)
    }

    pub fn buffered_bytes(&self, batch_id: u64) -> usize {
        self.batches.get(&batch_id).map_or(0, |e| e.output.len())
    }

    pub fn batches_in(&self, state: BatchState) -> Vec<u64> {
        self.batches.iter().filter(|(_, e)| e.state == state).map(|(&id, _)| id).collect()
    }

    /// Released output: committed batches in batch order.
    pub fn committed_output(&self) -> Vec<u8> {
        self.batches
            .values()
            .filter(|e| e.state == BatchState::Committed)
            .flat_map(|e| e.output.iter().copied())
            .collect()
    }
}

fn abandon(entry: &mut Entry) {
    entry.state = BatchState::Abandoned;
    entry.output = Vec::new();
}

/// Applies one authentication verdict and returns the updated ledger.
pub fn eager_resolve(mut ledger: EagerLedger, batch_id: u64, outcome: AuthOutcome) -> Result<EagerLedger, LedgerError> {
    ledger.resolve(batch_id, outcome)?;
    Ok(ledger)
}
