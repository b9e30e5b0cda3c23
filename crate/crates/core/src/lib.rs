//! Simulation and learning toolkit for choosing departure vertiports in an
//! integrated air-ground mobility network.

// Config checks use negated float comparisons so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod airside;
pub mod env;
pub mod harness;
pub mod neural;
pub mod policies;
pub mod ppo;
pub mod world;
