//! Microbenchmark driver: prefill, timed mixed workloads over uniform or
//! Zipfian keys, and sum-of-keys validation.

pub mod trial;
pub mod zipf;

pub use trial::{
    mean_ops_per_us,
    prefill, run_trial, run_trials, validate_sum, Pinning, SumCheck, TrialResult, Variant, WorkloadConfig,
    CSV_HEADER,
};
pub use zipf::{KeyDist, Zipf};
