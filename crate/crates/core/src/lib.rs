//! Desk-scale laboratory for off-policy value-based RL on token-level MDPs.
//!
//! Policies are logit-parameterized and their logits are read as soft
//! Q-values. The crate provides the ReVal shaped trajectory-Bellman loss, the
//! TBRM and regression baselines, a clipped GRPO surrogate, a FIFO replay
//! buffer, the training loop around them, and exact oracles (soft value
//! iteration by backward induction, finite differences, enumeration KL) for
//! checking all of it on small tasks.

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod instances;
pub mod math;
pub mod mdp;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
