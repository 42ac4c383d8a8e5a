//! Command-line and HTTP front ends for the `stylebank` library.

pub mod cli;
pub mod pipeline;
pub mod service;
