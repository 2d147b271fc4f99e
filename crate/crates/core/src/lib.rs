//! Constraint-family attribution for small neural combinatorial-optimisation
//! policies.
//!
//! The crate is `no_std` with `alloc`. It holds the pure algorithmic pieces:
//! instance generators, step semantics, a pointer-style policy with exact
//! reverse-mode input gradients, an LP relaxation solver with duals, the
//! attribution backends, a two-tier feasibility oracle, sample-and-verify
//! counterfactual search, greedy PAC sufficient subsets and the paired
//! statistics used to compare backends. IO, wall-clock time limits and the
//! command line live in the companion `famattr` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod attribution;
pub mod autodiff;
pub mod counterfactual;
pub mod csp;
pub mod env;
mod error;
pub mod instances;
pub mod lp;
pub mod pac;
pub mod policy;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use instances::{ConstraintFamily, FeatureTensor, GeneratorConfig, Instance, Problem};
pub use env::PolicyState;
pub use policy::{PolicyParams, StepDistribution};
