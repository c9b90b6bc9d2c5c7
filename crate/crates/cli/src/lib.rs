//! Config-driven batch runner for the overlap-identity checks.

pub mod app;
pub mod config;
pub mod report;
pub mod runner;

pub use app::{main_with, EXIT_INTERNAL, EXIT_PASS, EXIT_REJECT, EXIT_USAGE};
