//! Library half of the `focuskit` binary: config parsing and the
//! command runners, exposed so integration tests can drive the same
//! code paths the binary does.

pub mod config;
pub mod runner;
