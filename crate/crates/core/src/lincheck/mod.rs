//! History recording and linearizability checking for small concurrent and
//! crash-interrupted runs.

pub mod checker;
pub mod history;
pub mod stress;

pub use checker::{check, check_batch, check_from, mutate, step, LockedModel, Model, Verdict};
pub use history::{History, HistoryEvent, Op, OpKind, Recorder, Response, ThreadLog};
pub use stress::{elim_history, record, StressConfig};
