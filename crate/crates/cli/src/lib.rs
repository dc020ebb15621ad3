//! Command-line entry points and the HTTP inference service.

pub mod cli;
pub mod service;
