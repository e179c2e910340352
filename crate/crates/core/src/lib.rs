//! Fairness-aware safe offline reinforcement learning for logged clinical
//! trajectories: harm-risk scoring, group-conditional conformal safety
//! thresholds, safe behavior cloning, and off-policy evaluation.

// `!(x >= 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod cli;
pub mod data;
pub mod error;
pub mod features;
pub mod ope;
pub mod optim;
pub mod policy;
pub mod report;
pub mod risk;
pub mod seeding;
pub mod synthdata;

pub use error::{Error, Result};
