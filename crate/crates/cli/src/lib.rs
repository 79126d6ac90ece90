//! Library surface of the experiment harness; the `dlf` binary is a thin
//! wrapper over [`commands`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
