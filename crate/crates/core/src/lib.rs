pub mod blocking;
pub mod bounds;
pub mod cli;
pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod objective;
pub mod ocp;
pub mod parallel;
pub mod solver;
pub mod terminal;

pub use error::{Error, Result};
