//! Command-line front end for the nmtforge workbench.

pub mod ablate;
pub mod cli;
pub mod codec;
pub mod config;
pub mod pipeline;

/// A configuration or argument problem detected before any work starts.
/// Exits with status 1; every other failure exits with 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}
