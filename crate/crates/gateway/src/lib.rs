//! Network service and command-line front end for the duplex engine.

pub mod commands;
pub mod server;

pub use server::Server;
