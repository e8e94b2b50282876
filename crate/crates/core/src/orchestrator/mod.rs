//! Dynamic inference: a registry of task modules loaded on demand over one
//! shared frozen backbone, LRU eviction, and the request loop.

mod module;
mod registry;
mod serve;

pub use module::{peek_task_id, ModuleMetadata, TaskModule, MODULE_MAGIC, MODULE_VERSION};
pub use registry::{score_with, Pinned, Registry, RegistryStats, ScoreResult, DEFAULT_CAPACITY};
pub use serve::{
    handle_line, serve, serve_listener, serve_tcp, ServeSummary, ERR_INTERNAL, ERR_MALFORMED, ERR_UNKNOWN_TASK,
};
