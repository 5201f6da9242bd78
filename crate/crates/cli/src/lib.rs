//! Command-line entry points and the HTTP search service.

use std::path::{Path, PathBuf};

pub mod api;
pub mod args;
pub mod commands;
pub mod error;
pub mod service;

pub use args::{Cli, Command};
pub use error::CommandError;

/// `index.idx` -> `index.vocab`.
pub fn vocab_sidecar(index: &Path) -> PathBuf {
    index.with_extension("vocab")
}

/// `index.idx` -> `index.images.jsonl`.
pub fn images_sidecar(index: &Path) -> PathBuf {
    index.with_extension("images.jsonl")
}
