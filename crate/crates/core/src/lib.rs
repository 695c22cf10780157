//! Islanded DC microgrid with a distributed primal-dual controller that
//! trades generation cost against load curtailment, using flexibility
//! estimated from a motives-based model of household appliance adoption.

pub mod config;
pub mod controller;
pub mod error;
pub mod export;
pub mod network;
pub mod oracle;
pub mod plant;
pub mod psychosocial;
pub mod sim;
pub mod welfare;

#[cfg(test)]
mod proptests;

pub use error::{GridError, Result};
