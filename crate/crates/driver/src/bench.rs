//! MLUP/s throughput on an all-liquid periodic box.

use std::fmt;
use std::time::Instant;

use blockforge_core::blockgrid::BlockStorage;
use blockforge_core::comms::{barrier, run_workers, ExchangePlan, Transport};
use blockforge_core::field::Layout;
use blockforge_core::lbm::{
    add_lbm_fields, lbm_timestep, make_stencil, set_cell_equilibrium, write_flag, Flag, StencilKind, TrtParams,
    FLAGS, PDF,
};

use crate::{DriverError, Stage};

pub const WARMUP_STEPS: u64 = 10;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub size: [usize; 3],
    pub block_size: [usize; 3],
    pub workers: usize,
    /// Timed steps, run after the warm-up.
    pub steps: u64,
    pub omega: f64,
    pub stencil: StencilKind,
    /// Fill the box with obstacle cells instead of liquid.
    pub solid: bool,
}

impl BenchConfig {
    pub fn new(size: [usize; 3], workers: usize, steps: u64) -> Self {
        Self {
            size,
            block_size: size,
            workers,
            steps,
            omega: 1.6,
            stencil: StencilKind::D3Q19,
            solid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub size: [usize; 3],
    pub steps: u64,
    pub fluid_cells: Vec<usize>,
    pub seconds: Vec<f64>,
    pub per_worker: Vec<f64>,
    pub total: f64,
}

/// Million lattice updates per second; 0 when nothing was updated.
pub fn mlups(cells: usize, steps: u64, seconds: f64) -> f64 {
    if cells == 0 || steps == 0 || seconds <= 0.0 {
        return 0.0;
    }
    cells as f64 * steps as f64 / (seconds * 1e6)
}

pub fn benchmark_mlups(cfg: &BenchConfig) -> Result<BenchReport, DriverError> {
    let err = |e: String| DriverError::new(Stage::Benchmark, e);
    let stencil = make_stencil(cfg.stencil);
    let trt = TrtParams::from_omega(cfg.omega, blockforge_core::lbm::DEFAULT_MAGIC).map_err(|e| err(e.to_string()))?;
    let mut storage =
        BlockStorage::uniform(cfg.size, cfg.block_size, [true; 3], cfg.workers).map_err(|e| err(e.to_string()))?;
    add_lbm_fields(&mut storage, &stencil, Layout::SoA, 64).map_err(|e| err(e.to_string()))?;
    for b in storage.blocks() {
        let mut pdf = b[PDF].write();
        let mut flags = b[FLAGS].write();
        for c in pdf.interior_cells().collect::<Vec<_>>() {
            set_cell_equilibrium(&mut pdf, c, 1.0, [0.0; 3], &stencil);
            if cfg.solid {
                write_flag(&mut flags, c[0], c[1], c[2], Flag::Obstacle);
            }
        }
    }
    let storage = &storage;
    let results = run_workers(cfg.workers, |t| -> Result<(usize, f64), String> {
        let plan = ExchangePlan::new(storage, t.rank()).map_err(|e| e.to_string())?;
        let fluid: usize = if cfg.solid {
            0
        } else {
            storage
                .local_blocks(t.rank())
                .map_err(|e| e.to_string())?
                .map(|b| b.interval().num_cells())
                .sum()
        };
        blockforge_core::comms::exchange_ghost_layers(storage, &plan, &[FLAGS], &t).map_err(|e| e.to_string())?;
        for _ in 0..WARMUP_STEPS {
            lbm_timestep(storage, &plan, &trt, &stencil, &t).map_err(|e| e.to_string())?;
        }
        barrier(&t).map_err(|e| e.to_string())?;
        let start = Instant::now();
        for _ in 0..cfg.steps {
            lbm_timestep(storage, &plan, &trt, &stencil, &t).map_err(|e| e.to_string())?;
        }
        Ok((fluid, start.elapsed().as_secs_f64()))
    });
    let mut fluid_cells = Vec::new();
    let mut seconds = Vec::new();
    for r in results {
        let (c, s) = r.map_err(err)?;
        fluid_cells.push(c);
        seconds.push(s);
    }
    let per_worker = fluid_cells.iter().zip(&seconds).map(|(&c, &s)| mlups(c, cfg.steps, s)).collect();
    let slowest = seconds.iter().cloned().fold(0.0, f64::max);
    Ok(BenchReport {
        size: cfg.size,
        steps: cfg.steps,
        total: mlups(fluid_cells.iter().sum(), cfg.steps, slowest),
        fluid_cells,
        seconds,
        per_worker,
    })
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [nx, ny, nz] = self.size;
        writeln!(
            f,
            "benchmark: {nx}x{ny}x{nz} cells, {} workers, {} steps ({WARMUP_STEPS} warm-up steps excluded)",
            self.per_worker.len(),
            self.steps
        )?;
        for (w, m) in self.per_worker.iter().enumerate() {
            writeln!(f, "worker {w}: {m:.3} MLUP/s")?;
        }
        writeln!(f, "total: {:.3} MLUP/s", self.total)
    }
}
