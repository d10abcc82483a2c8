//! Scenario scripts in Rhai.
//!
//! A scenario registers callbacks by name:
//!
//! ```text
//! callback("config", || #{ Physical: #{ viscosity: 1e-6*m*m/s, dx: 0.01*m } });
//! callback("domain_init", |cell| if is_at_border(cell, "W") { #{ boundary: ["pressure", 1.01] } });
//! callback("at_end_of_timestep", |blocks| { ... });
//! ```
//!
//! Every worker runs its own interpreter; collectives (`reduce`, `gather_slice`)
//! go through the worker's transport.

mod bindings;
mod convert;
mod host;

use thiserror::Error;

pub use bindings::{ArrayView, BlockCollection, BlockHandle, ResultLog, ResultSink, ResultValue};
pub use convert::{config_from_dynamic, config_to_dynamic, BoundarySpec, DomainInit, DOMAIN_INIT_KEYS};
pub use host::{
    host_expose, CallbackRegistry, ExposeMode, Exposure, HostObject, ScriptHost, AT_END_OF_TIMESTEP, CONFIG,
    DOMAIN_INIT,
};
pub use rhai::Dynamic;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script load error at line {line}: {message}")]
    Load { line: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("missing config callback")]
    MissingConfig,
    #[error("callback {name} failed: {message}")]
    Runtime { name: String, message: String },
    #[error("config callback must return a mapping, got {0}")]
    NotAMapping(String),
    #[error("config value at {path}: {message}")]
    Conversion { path: String, message: String },
    #[error("domain_init returned unrecognized key {0:?}")]
    UnknownKey(String),
    #[error("fill_level {0} outside [0, 1]")]
    FillOutOfRange(f64),
    #[error("domain_init value for {key}: {message}")]
    BadInitValue { key: String, message: String },
    #[error("a {0} can only be exposed by copy")]
    NotByReference(&'static str),
    #[error("a {0} can only be exposed by reference")]
    NotByCopy(&'static str),
    #[error("callback {name} takes {declared} arguments but only {exposed} are exposed")]
    Arity { name: String, declared: usize, exposed: usize },
}
