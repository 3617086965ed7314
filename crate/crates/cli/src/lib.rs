//! Command line front end and HTTP service for surrogate audits.

pub mod args;
pub mod backend;
pub mod commands;
pub mod exit;
pub mod server;
