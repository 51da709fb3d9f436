//! Pointer value retrieval (PVR) tasks: deterministic dataset synthesis,
//! distribution-shift splits, noise-sensitivity estimation, brute-force
//! auditing and a small reference MLP trained with manual gradients.

pub mod dshift;
pub mod error;
pub mod idx;
pub mod noise;
pub mod oracle;
pub mod rng;
pub mod task;
pub mod taskgen;
pub mod trainer;
pub mod visualgen;

mod par;
pub use par::default_workers;

pub use error::{Error, Result};
pub use task::{Aggregation, BlockPosition, Sequence, TaskSpec};
pub use taskgen::{Dataset, DatasetHeader, Example, ShiftTag};
