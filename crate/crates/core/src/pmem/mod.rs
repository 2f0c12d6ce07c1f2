//! Simulated persistent memory and the durable tree variants built on it.
//!
//! Node contents are mirrored into a [`ShadowMemory`] that tracks, per cache
//! line, the volatile value, the value last written back, and lines flushed
//! but not yet fenced. A crash keeps the written-back lines plus any subset
//! of the pending ones.

pub mod durable;
pub mod explore;
pub mod recover;
pub mod shadow;

pub use durable::{PElimTree, POccTree, Simulated};
pub use explore::{explore_crashes, explore_two_threads, random_script, CrashPlan, CrashVerdict, VerdictReport};
pub use recover::{decode_image, recover, RecoveryError};
pub use shadow::{CrashImage, Observer, PersistEvent, PersistentImage, ShadowMemory};
