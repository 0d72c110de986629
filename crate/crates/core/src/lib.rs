//! Adaptive event-triggered backstepping control of strict-feedback systems
//! whose parameters vary quickly in time.

pub mod cli;
pub mod config;
pub mod controller;
pub mod diff;
pub mod error;
pub mod model;
pub mod sim;
pub mod trigger;
pub mod verify;

pub use error::{Error, Result};
