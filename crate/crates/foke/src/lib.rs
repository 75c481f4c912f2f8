//! HTTP service and command-line front ends for `foke-core`.

pub mod cli;
pub mod service;
