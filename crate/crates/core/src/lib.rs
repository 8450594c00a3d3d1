//! Prototype readout layer with an exact competitive-loss decomposition,
//! two-timescale training, stability diagnostics, soft and hard vector
//! quantisation, and a two-level hierarchy.

pub mod data;
pub mod error;
pub mod exec;
pub mod hierarchy;
pub mod layer;
pub mod loss;
pub mod metrics;
pub mod numerics;
pub mod stability;
pub mod trainer;
pub mod vq;

pub use error::{DdclError, Result};
pub use exec::Backend;
pub use layer::{AssignmentMatrix, PrototypeBank};
pub use loss::LossReport;
pub use numerics::{Matrix, SeededRng};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
