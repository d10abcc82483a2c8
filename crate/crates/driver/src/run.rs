use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::rc::Rc;
use std::sync::{Arc, OnceLock};

use blockforge_core::blockgrid::BlockStorage;
use blockforge_core::comms::{
    allreduce_scalar, broadcast_bytes, bytes_to_f64s, exchange_ghost_layers, f64s_to_bytes, run_workers,
    ExchangePlan, LocalTransport, ReduceOp, Transport,
};
use blockforge_core::freesurface::{
    add_free_surface_fields, fslbm_timestep, init_free_surface, BubbleRegistry, FreeSurfaceParams, FILL,
};
use blockforge_core::lbm::{
    add_lbm_fields, lbm_timestep, make_stencil, set_cell_equilibrium, update_macroscopic, write_flag, Flag,
    Stencil, TrtParams, DENSITY, FLAGS, PDF, VELOCITY,
};
use blockforge_core::unitsconfig::ConfigTree;
use blockforge_script::{
    host_expose, BlockCollection, BoundarySpec, DomainInit, ExposeMode, HostObject, ResultValue, ScriptHost,
    AT_END_OF_TIMESTEP,
};
use blockforge_steering::{check_interrupt, run_console, ConsoleAction, SteeringServer};
use log::{info, warn};

use crate::bench::{benchmark_mlups, BenchConfig, BenchReport};
use crate::plan::{configure, Mode, RunPlan, Settings};
use crate::store::{ResultStore, RunSink};
use crate::vtk::{gather_fields, write_vtk};
use crate::{DriverError, Stage};

/// One console session as seen by root.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    /// Step that was running when the client connected.
    pub connect_step: Option<u64>,
    /// The session ran after this step and before the next one.
    pub opened_after: u64,
    pub commands: Vec<String>,
    pub action: ConsoleAction,
}

/// What root saw of a finished run.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub settings: Option<Settings>,
    pub steps_completed: u64,
    pub shutdown: bool,
    pub sessions: Vec<SessionInfo>,
    pub vtk_files: Vec<PathBuf>,
    pub run_id: Option<i64>,
    /// Every `log.result` of the root interpreter as `(step, name, value)`.
    pub results: Vec<(u64, String, ResultValue)>,
    /// `(step, max |u(step) - u(step - 1)|)`.
    pub residuals: Vec<(u64, f64)>,
    /// Captured fields after the last step: global x-fastest, components
    /// interleaved.
    pub fields: BTreeMap<String, Vec<f64>>,
    pub bench: Option<BenchReport>,
    pub listening: Vec<(String, SocketAddr)>,
    /// Text printed by scripts outside console sessions.
    pub script_output: String,
}

/// Runs a scenario to completion. Errors name the stage that failed; a
/// validation failure stops the run before its first step.
pub fn run_simulation(plan: &RunPlan) -> Result<RunSummary, DriverError> {
    plan.check()?;
    if plan.benchmark {
        return run_benchmark(plan);
    }
    let shared = OnceLock::new();
    let outcomes = run_workers(plan.workers, |t| run_worker(plan, &shared, t));
    let mut summary = None;
    let mut peer_error = None;
    for r in outcomes {
        match r {
            Ok(Some(s)) => summary = Some(s),
            Ok(None) => {}
            Err(e) if e.peer => peer_error = peer_error.or(Some(e)),
            Err(e) => return Err(e),
        }
    }
    match (summary, peer_error) {
        (_, Some(e)) => Err(e),
        (Some(s), None) => Ok(s),
        (None, None) => Err(DriverError::new(Stage::Plan, "root produced no summary")),
    }
}

fn run_benchmark(plan: &RunPlan) -> Result<RunSummary, DriverError> {
    let t: Rc<dyn Transport> = Rc::new(LocalTransport::solo());
    let mut host = load(plan, t)?;
    let (_, settings) = configure(&mut host, plan)?;
    let mut cfg = BenchConfig::new(settings.size, plan.workers, settings.timesteps);
    cfg.block_size = settings.block_size;
    cfg.omega = settings.omega;
    cfg.stencil = settings.stencil;
    let report = benchmark_mlups(&cfg)?;
    print!("{report}");
    Ok(RunSummary {
        settings: Some(settings),
        bench: Some(report),
        ..Default::default()
    })
}

fn load(plan: &RunPlan, t: Rc<dyn Transport>) -> Result<ScriptHost, DriverError> {
    ScriptHost::load_scenario(&plan.scenario, t).map_err(|e| DriverError::new(Stage::Load, e.to_string()))
}

/// Collective. Every worker learns whether any worker failed; the ones that
/// did not fail return a peer error.
fn agree<T, R>(t: &T, local: Result<R, DriverError>, stage: Stage) -> Result<R, DriverError>
where
    T: Transport + ?Sized,
{
    let failed = allreduce_scalar(t, local.is_err() as u8 as f64, ReduceOp::Max)
        .map_err(|e| DriverError::new(stage, e.to_string()))?;
    match local {
        Ok(_) if failed > 0.0 => Err(DriverError {
            stage,
            message: "stopped because another worker failed".into(),
            peer: true,
        }),
        other => other,
    }
}

fn build_storage(s: &Settings, workers: usize) -> Result<Arc<BlockStorage>, DriverError> {
    let err = |e: String| DriverError::new(Stage::Decompose, e);
    let stencil = make_stencil(s.stencil);
    let mut storage =
        BlockStorage::uniform(s.size, s.block_size, s.periodic, workers).map_err(|e| err(e.to_string()))?;
    add_lbm_fields(&mut storage, &stencil, s.layout, 64).map_err(|e| err(e.to_string()))?;
    if s.mode == Mode::Fslbm {
        add_free_surface_fields(&mut storage, &fs_params(s)?).map_err(|e| err(e.to_string()))?;
    }
    Ok(Arc::new(storage))
}

fn fs_params(s: &Settings) -> Result<FreeSurfaceParams, DriverError> {
    FreeSurfaceParams::new(s.sigma, FreeSurfaceParams::default().epsilon, s.relabel_interval)
        .map_err(|e| DriverError::new(Stage::Validate, e.to_string()))
}

/// Flag for a `boundary` entry. Names are case-insensitive.
fn boundary_flag(b: &BoundarySpec) -> Result<Flag, String> {
    let name = b.name.to_ascii_lowercase();
    let want = |n: usize| {
        if b.params.len() == n {
            Ok(())
        } else {
            Err(format!("boundary {} takes {n} parameters, got {}", b.name, b.params.len()))
        }
    };
    match name.as_str() {
        "noslip" => want(0).map(|_| Flag::NoSlip),
        "obstacle" => want(0).map(|_| Flag::Obstacle),
        "pressure" => want(1).map(|_| Flag::Pressure(b.params[0])),
        "velocity" | "ubb" => want(3).map(|_| Flag::Velocity([b.params[0], b.params[1], b.params[2]])),
        "" | "fluid" => want(0).map(|_| Flag::Fluid),
        _ => Err(format!("unknown boundary {:?}", b.name)),
    }
}

fn init_domain(
    host: &mut ScriptHost,
    storage: &BlockStorage,
    settings: &Settings,
    stencil: &Stencil,
    rank: usize,
) -> Result<(), DriverError> {
    let err = |e: String| DriverError::new(Stage::DomainInit, e);
    host.set_domain_size(settings.size);
    let scripted = host.has_domain_init();
    for b in storage.local_blocks(rank).map_err(|e| err(e.to_string()))? {
        let mut pdf = b[PDF].write();
        let mut flags = b[FLAGS].write();
        let mut fill = (settings.mode == Mode::Fslbm).then(|| b[FILL].write());
        for c in pdf.interior_cells().collect::<Vec<_>>() {
            let g = b.to_global(c);
            let d = if scripted {
                host.invoke_domain_init(g).map_err(|e| err(format!("cell {g:?}: {e}")))?
            } else {
                DomainInit::default()
            };
            let flag = match &d.boundary {
                Some(spec) => boundary_flag(spec).map_err(|e| err(format!("cell {g:?}: {e}")))?,
                None => Flag::Fluid,
            };
            write_flag(&mut flags, c[0], c[1], c[2], flag);
            let rho = d.init_density.unwrap_or(settings.init_density);
            set_cell_equilibrium(&mut pdf, c, rho, d.init_vel.unwrap_or([0.0; 3]), stencil);
            let phi = d.fill_level.unwrap_or(1.0);
            match fill.as_mut() {
                Some(f) => f.set(c[0], c[1], c[2], 0, phi),
                None if phi < 1.0 => {
                    return Err(err(format!("cell {g:?}: fill_level {phi} needs Control/mode \"fslbm\"")));
                }
                None => {}
            }
        }
    }
    Ok(())
}

type Listening = Vec<(String, SocketAddr)>;

fn open_server(plan: &RunPlan) -> Result<(Option<SteeringServer>, Listening), DriverError> {
    if plan.steer_port.is_none() && plan.ws_port.is_none() && !plan.watch_signal {
        return Ok((None, Vec::new()));
    }
    let err = |e: std::io::Error| DriverError::new(Stage::Steering, e.to_string());
    let mut server = SteeringServer::new();
    let mut addrs = Vec::new();
    if let Some(p) = plan.steer_port {
        addrs.push(("tcp".to_string(), server.listen_tcp(p).map_err(err)?));
    }
    if let Some(p) = plan.ws_port {
        addrs.push(("ws".to_string(), server.listen_ws(p).map_err(err)?));
    }
    if plan.watch_signal {
        server.watch_signal().map_err(err)?;
    }
    for (kind, a) in &addrs {
        info!("steering console listening on {kind} {a}");
        if let Some(tx) = &plan.listen_notify {
            let _ = tx.send((kind.clone(), *a));
        }
    }
    Ok((Some(server), addrs))
}

fn update_macro(storage: &BlockStorage, stencil: &Stencil, rank: usize) -> Result<(), DriverError> {
    let err = |e: String| DriverError::new(Stage::Timestep, e);
    for b in storage.local_blocks(rank).map_err(|e| err(e.to_string()))? {
        update_macroscopic(b, stencil).map_err(|e| err(e.to_string()))?;
    }
    Ok(())
}

fn local_velocities(storage: &BlockStorage, rank: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let Ok(blocks) = storage.local_blocks(rank) else {
        return out;
    };
    for b in blocks {
        let v = b[VELOCITY].read();
        for c in v.interior_cells() {
            for d in 0..3 {
                out.push(v.get(c[0], c[1], c[2], d));
            }
        }
    }
    out
}

fn run_worker(
    plan: &RunPlan,
    shared: &OnceLock<Arc<BlockStorage>>,
    t: LocalTransport,
) -> Result<Option<RunSummary>, DriverError> {
    let t = Rc::new(t);
    let rank = t.rank();
    let root = t.is_root();
    let tr: Rc<dyn Transport> = t.clone();
    let t = &*t;

    // every worker runs its own interpreter through config and validation
    let setup = load(plan, tr).and_then(|mut h| configure(&mut h, plan).map(|(raw, s)| (h, raw, s)));
    let (mut host, raw, settings): (ScriptHost, ConfigTree, Settings) = agree(t, setup, Stage::Config)?;
    let stencil = make_stencil(settings.stencil);

    let built = if root {
        build_storage(&settings, plan.workers).map(|s| {
            let _ = shared.set(s);
        })
    } else {
        Ok(())
    };
    agree(t, built, Stage::Decompose)?;
    let storage = shared.get().expect("root published the storage").clone();
    let xplan = agree(
        t,
        ExchangePlan::new(&storage, rank).map_err(|e| DriverError::new(Stage::Decompose, e.to_string())),
        Stage::Decompose,
    )?;

    let init = init_domain(&mut host, &storage, &settings, &stencil, rank);
    agree(t, init, Stage::DomainInit)?;
    let mut registry = BubbleRegistry::default();
    let fs = match settings.mode {
        Mode::Lbm => {
            exchange_ghost_layers(&storage, &xplan, &[FLAGS], t)
                .map_err(|e| DriverError::new(Stage::DomainInit, e.to_string()))?;
            None
        }
        Mode::Fslbm => {
            init_free_surface(&storage, &xplan, &stencil, &mut registry, t)
                .map_err(|e| DriverError::new(Stage::DomainInit, e.to_string()))?;
            Some(fs_params(&settings)?)
        }
    };

    let mut summary = RunSummary {
        settings: Some(settings.clone()),
        ..Default::default()
    };
    // root-only resources
    let mut store = None;
    let mut server = None;
    let opened = if root {
        (|| {
            if let Some(path) = &plan.results {
                let st = Rc::new(ResultStore::open(path).map_err(|e| DriverError::new(Stage::Results, e.to_string()))?);
                let started = plan.started_at.clone().unwrap_or_else(|| chrono::Utc::now().to_rfc3339());
                let run_id = st
                    .begin_run(&plan.scenario.display().to_string(), &started, &raw.to_json().to_string())
                    .map_err(|e| DriverError::new(Stage::Results, e.to_string()))?;
                host.set_result_sink(Rc::new(RunSink {
                    store: st.clone(),
                    run_id,
                }));
                summary.run_id = Some(run_id);
                store = Some(st);
            }
            (server, summary.listening) = open_server(plan)?;
            Ok(())
        })()
    } else {
        Ok(())
    };
    agree(t, opened, Stage::Steering)?;

    let vtk_fields: Vec<&str> = match settings.mode {
        Mode::Lbm => vec![DENSITY, VELOCITY],
        Mode::Fslbm => vec![DENSITY, FILL, VELOCITY],
    };
    let vtk_every = plan.vtk_dir.as_ref().and(settings.vtk_interval);
    let mut trt = TrtParams::from_omega(settings.omega, settings.magic)
        .map_err(|e| DriverError::new(Stage::Validate, e.to_string()))?;
    let mut fs = fs;
    host.set_param("omega", settings.omega);
    if fs.is_some() {
        host.set_param("sigma", settings.sigma);
    }
    let blocks = host_expose(
        "blocks",
        HostObject::Blocks(BlockCollection::new(storage.clone(), rank)),
        ExposeMode::ByReference,
    )
    .map_err(|e| DriverError::new(Stage::Callback, e.to_string()))?;
    let has_callback = host.has_callback(AT_END_OF_TIMESTEP);
    let mut prev_vel: Option<Vec<f64>> = None;

    for step in 1..=settings.timesteps {
        host.set_step(step);
        let stepped = match &fs {
            None => lbm_timestep(&storage, &xplan, &trt, &stencil, t).map_err(|e| e.to_string()),
            Some(p) => fslbm_timestep(&storage, &xplan, &trt, p, &stencil, &mut registry, step, t)
                .map(|_| ())
                .map_err(|e| e.to_string()),
        };
        stepped.map_err(|e| DriverError::new(Stage::Timestep, format!("step {step}: {e}")))?;

        let vtk_due = vtk_every.is_some_and(|k| step % k == 0);
        let residual_due = plan.residual_interval.is_some();
        let mut macro_fresh = false;
        if has_callback || vtk_due || residual_due || step == settings.timesteps {
            update_macro(&storage, &stencil, rank)?;
            macro_fresh = true;
        }
        let bubbles = || {
            host_expose(
                "bubbles",
                HostObject::Bubbles(registry.bubbles().cloned().collect()),
                ExposeMode::ByCopy,
            )
            .map_err(|e| DriverError::new(Stage::Callback, e.to_string()))
        };
        if has_callback {
            let r = bubbles().and_then(|b| {
                host.invoke_callback(AT_END_OF_TIMESTEP, &[blocks.clone(), b])
                    .map_err(|e| DriverError::new(Stage::Callback, format!("step {step}: {e}")))
            });
            agree(t, r, Stage::Callback)?;
        }
        let out = host.take_output();
        if root && !out.is_empty() {
            print!("{out}");
            let _ = std::io::stdout().flush();
            summary.script_output.push_str(&out);
        }

        let pending = check_interrupt(server.as_ref(), t, step)
            .map_err(|e| DriverError::new(Stage::Steering, e.to_string()))?;
        if pending {
            if !macro_fresh {
                update_macro(&storage, &stencil, rank)?;
            }
            host.expose_global(&blocks);
            host.expose_global(&bubbles()?);
            let report = run_console(server.as_ref(), &mut host, t, step)
                .map_err(|e| DriverError::new(Stage::Steering, e.to_string()))?;
            if root {
                summary.sessions.push(SessionInfo {
                    connect_step: server.as_ref().and_then(|s| s.last_connect_step()),
                    opened_after: step,
                    commands: report.commands.clone(),
                    action: report.action,
                });
            }
            if report.action == ConsoleAction::Shutdown {
                summary.shutdown = true;
            }
        }

        // steerable parameters: root's values win
        let mine = [host.param("omega").unwrap_or(settings.omega), host.param("sigma").unwrap_or(settings.sigma)];
        let agreed = broadcast_bytes(t, root.then(|| f64s_to_bytes(&mine)).as_deref())
            .and_then(|b| bytes_to_f64s(&b))
            .map_err(|e| DriverError::new(Stage::Steering, e.to_string()))?;
        // a rejected value is reverted on every worker alike
        if agreed[0] != trt.omega_even {
            match TrtParams::from_omega(agreed[0], settings.magic) {
                Ok(p) => {
                    trt = p;
                    info!("step {step}: omega set to {}", agreed[0]);
                }
                Err(e) => {
                    warn!("step {step}: omega not changed: {e}");
                    host.set_param("omega", trt.omega_even);
                }
            }
        }
        if let Some(p) = fs.as_mut() {
            if agreed[1] != p.sigma {
                match FreeSurfaceParams::new(agreed[1], p.epsilon, p.relabel_interval) {
                    Ok(np) => {
                        *p = np;
                        info!("step {step}: sigma set to {}", agreed[1]);
                    }
                    Err(e) => {
                        warn!("step {step}: sigma not changed: {e}");
                        host.set_param("sigma", p.sigma);
                    }
                }
            }
        }

        if vtk_due {
            let dir = plan.vtk_dir.as_ref().expect("vtk_due implies a directory");
            if let Some(p) = write_vtk(&storage, &vtk_fields, step, dir, t)? {
                summary.vtk_files.push(p);
            }
        }
        if residual_due {
            let now = local_velocities(&storage, rank);
            let local = match &prev_vel {
                Some(p) => now.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                None => f64::INFINITY,
            };
            let r = allreduce_scalar(t, local, ReduceOp::Max)
                .map_err(|e| DriverError::new(Stage::Timestep, e.to_string()))?;
            if plan.residual_interval.is_some_and(|k| step % k == 0) && root {
                summary.residuals.push((step, r));
            }
            prev_vel = Some(now);
        }
        summary.steps_completed = step;
        if summary.shutdown {
            info!("shutdown requested after step {step}");
            break;
        }
    }

    if !plan.capture.is_empty() {
        let names: Vec<&str> = plan.capture.iter().map(String::as_str).collect();
        if let Some(values) = gather_fields(&storage, &names, t)? {
            summary.fields = plan.capture.iter().cloned().zip(values).collect();
        }
    }
    if root {
        summary.results = host.results();
        if let Some(s) = &server {
            if s.is_pending() {
                warn!("a console client connected after the last step and was not served");
            }
        }
        drop(store);
        Ok(Some(summary))
    } else {
        Ok(None)
    }
}
