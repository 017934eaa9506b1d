//! Hierarchical hybrid agent: a recurrent switching linear dynamical system is
//! learned online from trajectory data, its softmax gating function partitions
//! the state-control space into regions, and a discrete active-inference
//! planner chooses which region to steer toward next. Region-to-region moves
//! are executed by cached finite-horizon linear-quadratic controllers.
//!
//! Layering, bottom to top:
//!
//! * [`env`]: the continuous control task (sparse-reward mountain car).
//! * [`rslds`]: model types, variational inference, and learning.
//! * [`partition`]: softmax cells and LP-based region adjacency.
//! * [`priors`]: per-region target states found by gating-probability ascent.
//! * [`lqr`]: finite-horizon tracking controllers and the per-pair cache.
//! * [`planner`]: Dirichlet transition beliefs and expected-free-energy
//!   policy selection over the discrete region graph.
//! * [`agent`]: the online loop gluing filtering, decisions, and refits.
//! * [`harness`]: experiment runners, logging, and file artifacts.
//!
//! [`oracles`] holds independent reference implementations (enumeration,
//! quadrature, classical smoothers) used to validate the fast paths.

pub mod agent;
pub mod chain;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lqr;
pub mod oracles;
pub mod par;
pub mod partition;
pub mod planner;
pub mod priors;
pub mod rslds;
pub mod simplex;
pub mod snapshot;

pub use config::Config;
pub use error::{Error, Result};

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
