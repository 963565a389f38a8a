//! Domain types shared by every part of the platform.
//!
//! All values are plain data: immutable once built, `Send + Sync`, and
//! serialized to the canonical JSON form used on the wire and in files.

mod roles;
mod trace;
mod types;
mod validate;

pub use roles::map_roles;
pub use trace::{ErrorOrigin, PhaseCause, Trace, TraceEntry, TraceKind};
pub use types::*;
pub use validate::{
    is_integration_name, is_tool_id, is_tool_url, validate_activity_definition, validate_binding,
    validate_descriptor, validate_operation, validate_with_tools, Violation, ViolationKind,
};
