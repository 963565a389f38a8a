//! Runtime integration of cooperative tools.
//!
//! Tools are fetched as artifacts, describe themselves, and are filtered down
//! to their `ia_` integration surface ([`registry`]). A parent activity
//! ([`model`]) wires slots together with bindings; the [`server`] evaluates
//! them ([`engine`]) when events arrive and sends commands to the per-user
//! [`host`] that runs the tool clients. [`harness`] drives the whole pipeline
//! from scripts.

pub mod canonical;
pub mod contract;
pub mod engine;
pub mod harness;
pub mod host;
pub mod model;
pub mod registry;
pub mod server;
pub mod tools;
pub mod wire;
