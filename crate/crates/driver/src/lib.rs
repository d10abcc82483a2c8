//! Scenario runner.
//!
//! `run_simulation` takes a scenario script through config, unit conversion,
//! validation, decomposition and per-cell initialization, then runs the
//! timestep loop with the `at_end_of_timestep` callback, steering checks and
//! periodic VTK output. Workers are threads connected by the in-process
//! transport; root does all file and console I/O.

mod bench;
mod plan;
mod run;
mod store;
mod vtk;

use std::fmt;

use thiserror::Error;

pub use bench::{benchmark_mlups, mlups, BenchConfig, BenchReport, WARMUP_STEPS};
pub use plan::{Mode, RunPlan, Settings};
pub use run::{run_simulation, RunSummary, SessionInfo};
pub use store::{ResultRecord, ResultStore, RunRow, RunSink, StoreError};
pub use vtk::{format_g, format_g9, gather_fields, render_vtk, vtk_file_name, write_vtk};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Plan,
    Load,
    Config,
    Units,
    Validate,
    Decompose,
    DomainInit,
    Timestep,
    Callback,
    Steering,
    Vtk,
    Results,
    Benchmark,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Plan => "plan",
            Stage::Load => "load",
            Stage::Config => "config",
            Stage::Units => "units",
            Stage::Validate => "validate",
            Stage::Decompose => "decompose",
            Stage::DomainInit => "domain_init",
            Stage::Timestep => "timestep",
            Stage::Callback => "callback",
            Stage::Steering => "steering",
            Stage::Vtk => "vtk",
            Stage::Results => "results",
            Stage::Benchmark => "benchmark",
        })
    }
}

/// A failed run: the stage that failed and why.
#[derive(Debug, Clone, Error)]
#[error("{stage}: {message}")]
pub struct DriverError {
    pub stage: Stage,
    pub message: String,
    /// Set on workers that stopped because another worker failed.
    pub peer: bool,
}

impl DriverError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
            peer: false,
        }
    }
}
