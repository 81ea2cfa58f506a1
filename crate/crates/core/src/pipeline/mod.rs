//! Model of the secure-transfer pipeline: per-batch stage timings, an
//! epoch scheduler for each combination of optimizations, and the ledger
//! that keeps eager evaluation safe.

pub mod eager;
pub mod schedule;
pub mod timing;

pub use eager::{eager_resolve, AuthOutcome, BatchState, EagerLedger, FailurePolicy, LedgerError};
pub use schedule::{
    makespan, schedule, schedule_vs_bruteforce, steady_state_transfer, ComputeOverlap, Lane, Mode, Optimizations,
    OracleVerdict, PipelineConfig, PipelineError, ScheduleReport, Stage, DEFAULT_CRYPTO_LANE_FRACTION,
    DEFAULT_LANE_BUDGET, ORACLE_MAX_BATCHES,
};
pub use timing::{
    derive_timings, ByteRates, Flow, PresetNumbers, StageTiming, TimingError, TimingSource, WorkloadProfile,
    DEFAULT_XOR_FRACTION, PRESET_NAMES,
};
