use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::mpsc::Sender;

use blockforge_core::field::Layout;
use blockforge_core::lbm::{StencilKind, DEFAULT_MAGIC};
use blockforge_core::unitsconfig::{
    find_optimal_dt, nondimensionalize, omega_from_viscosity, validate_config, ConfigTree, ConfigValue,
    DtConstraints,
};
use blockforge_script::ScriptHost;

use crate::{DriverError, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lbm,
    Fslbm,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lbm" => Ok(Mode::Lbm),
            "fslbm" => Ok(Mode::Fslbm),
            _ => Err(format!("unknown mode {s:?}, expected lbm or fslbm")),
        }
    }
}

/// What to run and how. `None` fields fall back to the scenario's config;
/// set fields override it.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub scenario: PathBuf,
    pub timesteps: Option<u64>,
    pub vtk_interval: Option<u64>,
    pub vtk_dir: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub workers: usize,
    pub steer_port: Option<u16>,
    pub ws_port: Option<u16>,
    /// Open a console on the terminal when SIGUSR1 arrives.
    pub watch_signal: bool,
    pub benchmark: bool,
    pub mode: Option<Mode>,
    /// Recorded in the results store instead of the wall clock.
    pub started_at: Option<String>,
    /// Every this many steps, record the largest velocity change of one step.
    pub residual_interval: Option<u64>,
    /// Fields gathered onto root after the last step, see `RunSummary::fields`.
    pub capture: Vec<String>,
    /// Receives `("tcp" | "ws", address)` once the steering listeners are up.
    pub listen_notify: Option<Sender<(String, SocketAddr)>>,
}

impl RunPlan {
    pub fn new(scenario: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            timesteps: None,
            vtk_interval: None,
            vtk_dir: None,
            results: None,
            workers: 1,
            steer_port: None,
            ws_port: None,
            watch_signal: false,
            benchmark: false,
            mode: None,
            started_at: None,
            residual_interval: None,
            capture: Vec::new(),
            listen_notify: None,
        }
    }

    pub fn check(&self) -> Result<(), DriverError> {
        let bad = |m: &str| Err(DriverError::new(Stage::Plan, m));
        if self.workers == 0 {
            return bad("worker count must be at least 1");
        }
        if self.timesteps == Some(0) {
            return bad("timesteps must be at least 1");
        }
        if self.vtk_interval == Some(0) || self.residual_interval == Some(0) {
            return bad("intervals must be at least 1");
        }
        Ok(())
    }
}

/// Run parameters read from the nondimensionalized config.
///
/// Keys: `Domain/size` (required), `Domain/block_size`, `Domain/periodic`,
/// `Domain/stencil`, `Domain/layout`; `Physical/omega` or
/// `Physical/viscosity`, `Physical/magic`, `Physical/surface_tension`;
/// `Control/timesteps`, `Control/vtk_output_interval`, `Control/mode`,
/// `Control/relabel_interval`, `Control/init_density`.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub size: [usize; 3],
    pub block_size: [usize; 3],
    pub periodic: [bool; 3],
    pub stencil: StencilKind,
    pub layout: Layout,
    pub omega: f64,
    pub magic: f64,
    pub sigma: f64,
    pub timesteps: u64,
    pub vtk_interval: Option<u64>,
    pub mode: Mode,
    pub relabel_interval: u64,
    pub init_density: f64,
}

fn cfg_err(path: &str, message: impl Into<String>) -> DriverError {
    DriverError::new(Stage::Validate, format!("{path}: {}", message.into()))
}

fn count(v: f64, path: &str) -> Result<usize, DriverError> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(cfg_err(path, format!("expected a positive integer, got {v}")))
    }
}

fn triple(tree: &ConfigTree, path: &str) -> Result<Option<Vec<ConfigValue>>, DriverError> {
    match tree.lookup(path) {
        None => Ok(None),
        Some(ConfigValue::List(l)) if l.len() == 3 => Ok(Some(l.clone())),
        Some(_) => Err(cfg_err(path, "expected a list of 3 values")),
    }
}

fn size3(tree: &ConfigTree, path: &str) -> Result<Option<[usize; 3]>, DriverError> {
    let Some(l) = triple(tree, path)? else {
        return Ok(None);
    };
    let mut out = [0; 3];
    for (d, v) in l.iter().enumerate() {
        let x = v.as_number().ok_or_else(|| cfg_err(path, "expected numbers"))?;
        out[d] = count(x, path)?;
    }
    Ok(Some(out))
}

fn text(tree: &ConfigTree, path: &str) -> Result<Option<String>, DriverError> {
    match tree.lookup(path) {
        None => Ok(None),
        Some(ConfigValue::Str(s)) => Ok(Some(s.clone())),
        Some(_) => Err(cfg_err(path, "expected a string")),
    }
}

impl Settings {
    /// Reads the settings; plan overrides are expected to be in the tree already.
    pub fn from_tree(tree: &ConfigTree, plan: &RunPlan) -> Result<Self, DriverError> {
        let size = size3(tree, "Domain/size")?.ok_or_else(|| cfg_err("Domain/size", "missing"))?;
        let block_size = size3(tree, "Domain/block_size")?.unwrap_or(size);
        let periodic = match triple(tree, "Domain/periodic")? {
            None => [false; 3],
            Some(l) => {
                let mut p = [false; 3];
                for (d, v) in l.iter().enumerate() {
                    p[d] = match v {
                        ConfigValue::Bool(b) => *b,
                        _ => return Err(cfg_err("Domain/periodic", "expected booleans")),
                    };
                }
                p
            }
        };
        let stencil = match text(tree, "Domain/stencil")? {
            None => StencilKind::D3Q19,
            Some(s) => s.parse().map_err(|e| cfg_err("Domain/stencil", format!("{e}")))?,
        };
        let layout = match text(tree, "Domain/layout")?.as_deref().map(str::to_ascii_lowercase).as_deref() {
            None | Some("soa") => Layout::SoA,
            Some("aos") => Layout::AoS,
            Some(other) => return Err(cfg_err("Domain/layout", format!("unknown layout {other:?}"))),
        };
        let omega = match (tree.number("Physical/omega"), tree.number("Physical/viscosity")) {
            (Some(w), _) => w,
            (None, Some(nu)) => omega_from_viscosity(nu),
            (None, None) => return Err(cfg_err("Physical", "set omega or viscosity")),
        };
        let mode = match plan.mode {
            Some(m) => m,
            None => match text(tree, "Control/mode")? {
                None => Mode::Lbm,
                Some(s) => s.parse().map_err(|e: String| cfg_err("Control/mode", e))?,
            },
        };
        let timesteps = tree.number("Control/timesteps").ok_or_else(|| cfg_err("Control/timesteps", "missing"))?;
        let vtk_interval = match tree.number("Control/vtk_output_interval") {
            Some(v) => Some(count(v, "Control/vtk_output_interval")? as u64),
            None => None,
        };
        let relabel_interval = match tree.number("Control/relabel_interval") {
            Some(v) => count(v, "Control/relabel_interval")? as u64,
            None => 100,
        };
        Ok(Self {
            size,
            block_size,
            periodic,
            stencil,
            layout,
            omega,
            magic: tree.number("Physical/magic").unwrap_or(DEFAULT_MAGIC),
            sigma: tree.number("Physical/surface_tension").unwrap_or(0.0),
            timesteps: count(timesteps, "Control/timesteps")? as u64,
            vtk_interval,
            mode,
            relabel_interval,
            init_density: tree.number("Control/init_density").unwrap_or(1.0),
        })
    }
}

/// config -> dt (when missing) -> nondimensionalize -> plan overrides ->
/// validate. Returns the config as the script returned it and the lattice tree.
pub fn configure(host: &mut ScriptHost, plan: &RunPlan) -> Result<(ConfigTree, Settings), DriverError> {
    let raw = host
        .invoke_config()
        .map_err(|e| DriverError::new(Stage::Config, e.to_string()))?;
    let mut tree = raw.clone();
    if tree.has_quantities() && tree.lookup("Physical/dt").is_none() && tree.lookup("Physical/u_max").is_some() {
        let dt = find_optimal_dt(&tree, &DtConstraints::default())
            .map_err(|e| DriverError::new(Stage::Units, e.to_string()))?;
        tree.set_path("Physical/dt", ConfigValue::Quantity(dt));
    }
    let mut tree = nondimensionalize(&tree).map_err(|e| DriverError::new(Stage::Units, e.to_string()))?;
    if let Some(t) = plan.timesteps {
        tree.set_path("Control/timesteps", ConfigValue::Number(t as f64));
    }
    if let Some(v) = plan.vtk_interval {
        tree.set_path("Control/vtk_output_interval", ConfigValue::Number(v as f64));
    }
    let diags = validate_config(&tree);
    if !diags.is_empty() {
        let text: Vec<String> = diags.iter().map(|d| format!("{}: {}", d.path, d.message)).collect();
        return Err(DriverError::new(Stage::Validate, text.join("; ")));
    }
    let settings = Settings::from_tree(&tree, plan)?;
    Ok((raw, settings))
}
