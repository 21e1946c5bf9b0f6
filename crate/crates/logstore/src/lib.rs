//! LogStore server, client and benchmark harness on top of `logstore-core`.

pub mod bench;
pub mod cli;
pub mod client;
pub mod config;
pub mod protocol;
pub mod server;

pub use server::{Server, ServerError};
