//! Concurrent relaxed (a,b)-trees.
//!
//! [`tree::OccTree`] searches without locks and validates leaf reads with
//! per-node versions; updates lock only the nodes they change.
//! [`tree::ElimTree`] adds publishing elimination, which lets concurrent
//! same-key inserts and deletes complete without writing the leaf.
//! [`pmem::POccTree`] and [`pmem::PElimTree`] run the same algorithms over
//! simulated persistent memory and can be recovered from a crash image.

pub mod lincheck;
pub mod par;
pub mod pmem;
pub mod reclaim;
pub mod stats;
pub mod sync;
pub mod tree;
pub mod workload;

pub use par::ExecMode;
pub use tree::{AbTree, Dictionary, ElimTree, OccTree, Params};
