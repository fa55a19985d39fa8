//! Multistage adaptive sensing-effort allocation for sparse signals.
//!
//! A sparse signal is observed in stages; each stage distributes a share of
//! a fixed effort budget over components, observation precision grows with
//! effort, and a Bayesian belief over the support and amplitudes is updated
//! after every stage. The crate provides the belief recursions, the
//! per-stage water-filling allocators, a family of allocation policies
//! (non-adaptive, oracle, distilled sensing, generalized and rollout
//! open-loop feedback control), offline calibration of the policy
//! schedules, a Monte Carlo evaluation harness with a deterministic
//! counter-based RNG, and a radar imaging demonstration.

pub mod allocator;
pub mod belief;
pub mod error;
pub mod loss;
pub mod rng;

pub use allocator::{
    project_simplex, solve_general, stage_split, waterfill_power_law, AllocationProblem,
    AllocationResult,
};
pub use belief::{init_state, BeliefState, EffortFunction, PriorParams, EPS_OBS};
pub use error::{Error, Result};
pub use loss::{check_g_convexity, g_kernel, g_kernel_dh, ConvexityReport, LossSpec};
pub use rng::{Role, SeqStream, Stream};
