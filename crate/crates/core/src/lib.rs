//! Session-based sequential music recommendation with transformer encoders
//! and a skip-informed contrastive objective.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
