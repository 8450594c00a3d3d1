//! Linearised stability of the coupled encoder/prototype dynamics, free-energy
//! monotonicity audits, and the learning-rate-ratio sweep.

mod ablation;
mod eigen;
mod hessian;
mod lyapunov;
mod toy;
mod verdict;

pub use ablation::{ablation_sweep, AblationRow};
pub use eigen::{eigenvalues, spectral_norm, symmetric_eigenvalues, symmetric_part_is_pd};
pub use hessian::{estimate_hessian_blocks, estimate_hessian_from_gradient, HessianBlocks, ParamSystem, Reduction};
pub use lyapunov::{lyapunov_audit, record_trajectory, LyapunovReport, Snapshot, LYAPUNOV_REL_TOL};
pub use verdict::{assemble_jacobian, stability_verdict, sufficient_bound, StabilityVerdict};
pub use toy::{descend_to_stationary, toy_system, ToySystemParams};
