//! Exact tabular policy optimization.
//!
//! Projected policy gradient (PPG), projected Q-ascent (PQA), policy iteration,
//! value iteration and homotopic PQA on finite discounted MDPs, with exact
//! policy evaluation and diagnostics for every convergence bound the methods
//! are known to satisfy.

pub mod diagnostics;
pub mod error;
pub mod fmt;
pub mod instances;
pub mod mdp;
pub mod policy_opt;
pub mod simplex;
pub mod verify;

pub use error::{Error, Result, ValidationReport, Violation, ViolationKind};
pub use mdp::{ActionTable, Policy, TabularMdp, ValueBundle};
pub use policy_opt::{RunTrace, StepSchedule, UpdateRule};
