//! Networked nodes, gateway client, file formats and the `healthfog` CLI
//! built on `healthfog-core`.

pub mod cli;
pub mod client;
pub mod error;
pub mod io;
pub mod node;
pub mod train;
