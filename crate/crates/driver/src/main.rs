use std::path::PathBuf;
use std::process::ExitCode;

use blockforge::{run_simulation, Mode, RunPlan};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blockforge", version, about = "Block-structured lattice Boltzmann runner with scripted scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides Control/timesteps.
        #[arg(long)]
        timesteps: Option<u64>,
        /// Overrides Control/vtk_output_interval.
        #[arg(long)]
        vtk_interval: Option<u64>,
        /// Write VTK files here; without it no VTK output is written.
        #[arg(long)]
        vtk_dir: Option<PathBuf>,
        /// SQLite file for log.result records.
        #[arg(long)]
        results: Option<PathBuf>,
        /// TCP port of the line console.
        #[arg(long)]
        steer_port: Option<u16>,
        /// Websocket port; the console is served at /console.
        #[arg(long)]
        ws_port: Option<u16>,
        /// Open a console on this terminal when SIGUSR1 arrives.
        #[arg(long)]
        signal_console: bool,
        /// Measure MLUP/s on an all-liquid box of the scenario's size.
        #[arg(long)]
        benchmark: bool,
        /// Overrides Control/mode.
        #[arg(long)]
        mode: Option<Mode>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run {
        scenario,
        workers,
        timesteps,
        vtk_interval,
        vtk_dir,
        results,
        steer_port,
        ws_port,
        signal_console,
        benchmark,
        mode,
    } = Cli::parse().command;
    let mut plan = RunPlan::new(scenario);
    plan.workers = workers;
    plan.timesteps = timesteps;
    plan.vtk_interval = vtk_interval;
    plan.vtk_dir = vtk_dir;
    plan.results = results;
    plan.steer_port = steer_port;
    plan.ws_port = ws_port;
    plan.watch_signal = signal_console;
    plan.benchmark = benchmark;
    plan.mode = mode;
    match run_simulation(&plan) {
        Ok(s) => {
            if s.shutdown {
                log::info!("stopped from the console after step {}", s.steps_completed);
            } else if !benchmark {
                log::info!("completed {} steps", s.steps_completed);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
