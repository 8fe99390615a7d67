//! decmac: simulator and decentralized learning library for shared-message
//! medium access.
//!
//! `N` nodes must deliver `L` shared messages to a central receiver over
//! `M` orthogonal transmission opportunities, without talking to each other
//! and without retransmissions. Each message is held by a random, correlated
//! subset of nodes; delivery succeeds only if some opportunity carries
//! exactly one copy of the message and nothing else. The crate provides:
//!
//! - [`model`]: instance types and the exact success predicate;
//! - [`scenario`]: generative activation patterns (conditional
//!   Bayesian-network trees, Dirichlet-multinomial draws), temporal
//!   persistence and scheduled distribution shifts;
//! - [`policy`]: the per-(message, node) multilayer perceptron with exact
//!   hand-derived likelihood gradients;
//! - [`trainer`]: the reward-broadcast training loop, deterministic
//!   inference and online adaptation;
//! - [`baselines`]: distributed Thompson-sampling bandit and the
//!   uncoordinated random policy;
//! - [`oracle`]: exact enumeration and Monte Carlo checks for optimality
//!   and distribution-shift degradation;
//! - [`harness`]: config-driven seeded experiments with CSV output.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `decmac` binary for the config-driven CLI.

pub mod baselines;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod scenario;
pub mod stream;
pub mod trainer;

pub use model::{evaluate_success, ActiveSets, InstanceDims, ModelError, MoveTensor, Reward};
