//! Reinforcement-weighted multi-source meta-transfer learning.
//!
//! This crate trains a small multiple-choice scoring model by meta-learning
//! across several source tasks, where the contribution of each source task
//! is re-weighted every iteration by a recurrent policy network trained with
//! REINFORCE on loss-difference rewards. It provides:
//!
//! * a reverse-mode tape over flat `f64` parameter vectors ([`tape`]);
//! * SGD/AdamW optimizers and parameter blending ([`optim`], [`params`]);
//! * the scoring model and the task-weighting policy network ([`model`]);
//! * synthetic task families, episode sampling, and JSONL ingestion with
//!   feature hashing ([`tasks`]);
//! * first-order meta-updates, weighted variants, and transfer fine-tuning
//!   ([`meta`]);
//! * reward computation, epsilon-greedy trajectory sampling, self-critic
//!   REINFORCE, and weight estimation ([`rl`]);
//! * a config-driven experiment harness and CLI ([`harness`]).

pub mod error;
pub mod gradcheck;
pub mod guide;
pub mod harness;
mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod meta;
pub mod rl;
pub mod rng;
pub mod tasks;
pub mod tape;

pub use error::{Error, Result};
