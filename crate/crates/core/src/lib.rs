pub mod analysis;
pub mod audit;
pub mod cli;
pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod game;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod report;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
