//! Coordination service for a shared file workspace: the wire protocol,
//! the TCP server, its config file, and the `cowork` command line.

pub mod cli;
pub mod config;
pub mod protocol;
pub mod server;

pub use config::ServiceConfig;
pub use protocol::{Connection, Request, Response, Service, Status};
pub use server::{open_workspace, Server};
