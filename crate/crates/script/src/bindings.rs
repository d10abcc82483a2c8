//! Built-ins registered on every interpreter.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use blockforge_core::blockgrid::{Block, BlockStorage};
use blockforge_core::comms::{allreduce_scalar, barrier, gather_slice, reduce_scalar, LineSpec, ReduceOp, Transport};
use blockforge_core::field::SharedArrayView;
use blockforge_core::geometry::{self, Pipe, SpherePack, DEFAULT_SPHERE_RADIUS};
use blockforge_core::unitsconfig::{
    find_optimal_dt, lattice_scale, nondimensionalize, parse_quantity, to_lattice, unit_dims, DtConstraints, LatticeScale,
    Quantity,
};
use blockforge_steering::{frame_reply, ConsoleAction};
use rhai::{Array, Dynamic, Engine, EvalAltResult, FnPtr};

use crate::convert::{config_from_dynamic, config_to_dynamic, number};

type RResult<T> = Result<T, Box<EvalAltResult>>;

fn err<E: std::fmt::Display>(e: E) -> Box<EvalAltResult> {
    e.to_string().into()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResultValue {
    Real(f64),
    Text(String),
}

/// Destination of `log.result(name, value)`.
pub trait ResultSink {
    fn record(&self, step: u64, name: &str, value: &ResultValue) -> Result<(), String>;
}

pub(crate) struct HostState {
    pub transport: Rc<dyn Transport>,
    pub output: RefCell<String>,
    pub domain_size: Cell<Option<[usize; 3]>>,
    pub step: Cell<u64>,
    pub sink: RefCell<Option<Rc<dyn ResultSink>>>,
    pub results: RefCell<Vec<(u64, String, ResultValue)>>,
    pub action: Cell<ConsoleAction>,
    pub callbacks: RefCell<BTreeMap<String, FnPtr>>,
    /// Steerable run parameters; only keys seeded by the host can be set.
    pub params: RefCell<BTreeMap<String, f64>>,
}

impl HostState {
    pub fn new(transport: Rc<dyn Transport>) -> Self {
        Self {
            transport,
            output: RefCell::new(String::new()),
            domain_size: Cell::new(None),
            step: Cell::new(0),
            sink: RefCell::new(None),
            results: RefCell::new(Vec::new()),
            action: Cell::new(ConsoleAction::Continue),
            callbacks: RefCell::new(BTreeMap::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    fn emit(&self, text: &str) {
        self.output.borrow_mut().push_str(text);
    }
}

/// Script handle for `log`.
#[derive(Clone)]
pub struct ResultLog(Rc<HostState>);

impl ResultLog {
    fn record(&mut self, name: &str, value: ResultValue) -> RResult<()> {
        let step = self.0.step.get();
        if let Some(sink) = self.0.sink.borrow().as_ref() {
            sink.record(step, name, &value).map_err(err)?;
        }
        self.0.results.borrow_mut().push((step, name.to_string(), value));
        Ok(())
    }
}

/// Zero-copy view of a field as seen by scripts.
#[derive(Clone, Debug)]
pub struct ArrayView(pub SharedArrayView);

/// Local blocks of one worker. Iterating yields [`BlockHandle`]s.
#[derive(Clone)]
pub struct BlockCollection {
    storage: Arc<BlockStorage>,
    worker: usize,
}

impl BlockCollection {
    pub fn new(storage: Arc<BlockStorage>, worker: usize) -> Self {
        Self { storage, worker }
    }

    pub fn storage(&self) -> &Arc<BlockStorage> {
        &self.storage
    }

    fn handles(&self) -> Vec<BlockHandle> {
        self.storage
            .local_blocks(self.worker)
            .map(|it| it.cloned().map(BlockHandle).collect())
            .unwrap_or_default()
    }
}

impl IntoIterator for BlockCollection {
    type Item = BlockHandle;
    type IntoIter = std::vec::IntoIter<BlockHandle>;

    fn into_iter(self) -> Self::IntoIter {
        self.handles().into_iter()
    }
}

#[derive(Clone)]
pub struct BlockHandle(pub Block);

fn index(v: &Dynamic) -> RResult<i64> {
    if let Ok(i) = v.as_int() {
        return Ok(i);
    }
    match v.as_float() {
        Ok(f) if f.fract() == 0.0 => Ok(f as i64),
        _ => Err(format!("expected an integer, got {}", v.type_name()).into()),
    }
}

pub(crate) fn cell3(a: &Array) -> RResult<[i64; 3]> {
    if a.len() != 3 {
        return Err(format!("a cell needs 3 coordinates, got {}", a.len()).into());
    }
    Ok([index(&a[0])?, index(&a[1])?, index(&a[2])?])
}

fn num(v: &Dynamic) -> RResult<f64> {
    number(v).ok_or_else(|| format!("expected a number, got {}", v.type_name()).into())
}

fn vec3(a: &Array) -> RResult<[f64; 3]> {
    if a.len() != 3 {
        return Err(format!("expected 3 numbers, got {}", a.len()).into());
    }
    Ok([num(&a[0])?, num(&a[1])?, num(&a[2])?])
}

fn to_array(v: impl IntoIterator<Item = impl Into<Dynamic>>) -> Array {
    v.into_iter().map(Into::into).collect()
}

fn view_index(v: &ArrayView, idx: &Array) -> RResult<[usize; 4]> {
    let mut out = [0usize; 4];
    if idx.len() != 3 && idx.len() != 4 {
        return Err(format!("view index needs 3 or 4 entries, got {}", idx.len()).into());
    }
    for (d, x) in idx.iter().enumerate() {
        let i = index(x)?;
        if i < 0 || i as usize >= v.0.shape()[d] {
            return Err(format!("index {i} out of range for axis {d} of shape {:?}", v.0.shape()).into());
        }
        out[d] = i as usize;
    }
    Ok(out)
}

fn axis_of(name: &str) -> RResult<usize> {
    match name {
        "x" | "X" => Ok(0),
        "y" | "Y" => Ok(1),
        "z" | "Z" => Ok(2),
        _ => Err(format!("unknown axis {name:?}").into()),
    }
}

fn register_units(engine: &mut Engine) {
    engine
        .register_type_with_name::<Quantity>("Quantity")
        .register_get("magnitude", |q: &mut Quantity| q.magnitude)
        .register_get("dims", |q: &mut Quantity| to_array(q.dims.map(|d| d as i64)))
        .register_fn("to_string", |q: &mut Quantity| q.to_string())
        .register_fn("to_debug", |q: &mut Quantity| q.to_string())
        .register_fn("quantity", |s: &str| parse_quantity(s).map_err(err))
        .register_fn("*", |a: Quantity, b: Quantity| a.mul(&b).map_err(err))
        .register_fn("*", |a: f64, b: Quantity| b.scale(a))
        .register_fn("*", |a: Quantity, b: f64| a.scale(b))
        .register_fn("*", |a: i64, b: Quantity| b.scale(a as f64))
        .register_fn("*", |a: Quantity, b: i64| a.scale(b as f64))
        .register_fn("/", |a: Quantity, b: Quantity| a.div(&b).map_err(err))
        .register_fn("/", |a: Quantity, b: f64| Quantity::new(a.magnitude / b, a.dims).map_err(err))
        .register_fn("/", |a: Quantity, b: i64| Quantity::new(a.magnitude / b as f64, a.dims).map_err(err))
        .register_fn("/", |a: f64, b: Quantity| Quantity::scalar(a).div(&b).map_err(err))
        .register_fn("/", |a: i64, b: Quantity| Quantity::scalar(a as f64).div(&b).map_err(err))
        .register_fn("+", |a: Quantity, b: Quantity| a.add(&b).map_err(err))
        .register_fn("-", |a: Quantity, b: Quantity| a.sub(&b).map_err(err))
        .register_fn("-", |a: Quantity| a.scale(-1.0))
        .register_fn("**", |a: Quantity, n: i64| a.powi(n as i32).map_err(err))
        .register_fn("==", |a: Quantity, b: Quantity| a == b)
        .register_fn("!=", |a: Quantity, b: Quantity| a != b);

    engine
        .register_type_with_name::<LatticeScale>("LatticeScale")
        .register_get("dx", |s: &mut LatticeScale| s.dx)
        .register_get("dt", |s: &mut LatticeScale| s.dt)
        .register_fn("to_lattice", |s: &mut LatticeScale, q: Quantity| to_lattice(&q, s).map_err(err))
        .register_fn("lattice_scale", |cfg: rhai::Map| {
            lattice_scale(&config_from_dynamic(&cfg.into()).map_err(err)?).map_err(err)
        })
        .register_fn("find_optimal_dt", |cfg: rhai::Map| {
            find_optimal_dt(&config_from_dynamic(&cfg.into()).map_err(err)?, &DtConstraints::default()).map_err(err)
        })
        .register_fn("nondimensionalize", |cfg: rhai::Map| -> RResult<Dynamic> {
            let tree = nondimensionalize(&config_from_dynamic(&cfg.into()).map_err(err)?).map_err(err)?;
            Ok(config_to_dynamic(&tree))
        });
}

fn register_geometry(engine: &mut Engine, state: &Rc<HostState>) {
    engine
        .register_type_with_name::<Pipe>("Pipe")
        .register_fn("Pipe", |d: Dynamic, l: Dynamic, pos: Array| Pipe::new(num(&d)?, num(&l)?, vec3(&pos)?).map_err(err))
        .register_fn("rotate", |p: &mut Pipe, deg: Dynamic| p.rotate(num(&deg)?, "z").map_err(err))
        .register_fn("rotate", |p: &mut Pipe, deg: Dynamic, axis: &str| p.rotate(num(&deg)?, axis).map_err(err))
        .register_fn("contains", |p: &mut Pipe, cell: Array| Ok::<_, Box<EvalAltResult>>(p.contains(cell3(&cell)?)))
        .register_fn("shellContains", |p: &mut Pipe, cell: Array| {
            Ok::<_, Box<EvalAltResult>>(p.shell_contains(cell3(&cell)?))
        })
        .register_fn("shell_contains", |p: &mut Pipe, cell: Array| {
            Ok::<_, Box<EvalAltResult>>(p.shell_contains(cell3(&cell)?))
        })
        .register_fn("parabolicVel", |p: &mut Pipe, cell: Array, max: Dynamic| {
            Ok::<_, Box<EvalAltResult>>(to_array(p.parabolic_vel(cell3(&cell)?, num(&max)?)))
        })
        .register_fn("parabolic_vel", |p: &mut Pipe, cell: Array, max: Dynamic| {
            Ok::<_, Box<EvalAltResult>>(to_array(p.parabolic_vel(cell3(&cell)?, num(&max)?)))
        })
        .register_get("diameter", |p: &mut Pipe| p.diameter)
        .register_get("length", |p: &mut Pipe| p.length)
        .register_get("axis", |p: &mut Pipe| to_array(p.axis()));

    fn extent(nx: i64, ny: i64, nz: i64) -> RResult<[usize; 3]> {
        if nx <= 0 || ny <= 0 || nz <= 0 {
            return Err("domain extents must be positive".into());
        }
        Ok([nx as usize, ny as usize, nz as usize])
    }
    engine
        .register_type_with_name::<SpherePack>("SpherePack")
        .register_fn("sphere_pack", |nx: i64, ny: i64, nz: i64| {
            let [x, y, z] = extent(nx, ny, nz)?;
            geometry::sphere_pack(x, y, z, DEFAULT_SPHERE_RADIUS).map_err(err)
        })
        .register_fn("sphere_pack", |nx: i64, ny: i64, nz: i64, r: Dynamic| {
            let [x, y, z] = extent(nx, ny, nz)?;
            geometry::sphere_pack(x, y, z, num(&r)?).map_err(err)
        })
        .register_fn("overlap", |p: &mut SpherePack, cell: Array| Ok::<_, Box<EvalAltResult>>(p.overlap(cell3(&cell)?)))
        .register_get("radius", |p: &mut SpherePack| p.radius)
        .register_get("centers", |p: &mut SpherePack| {
            p.centers.iter().map(|c| Dynamic::from_array(to_array(*c))).collect::<Array>()
        })
        .register_fn("len", |p: &mut SpherePack| p.centers.len() as i64);

    let st = state.clone();
    engine.register_fn("is_at_border", move |cell: Array, sides: &str| -> RResult<bool> {
        let size = st.domain_size.get().ok_or("domain size not known yet; pass it explicitly")?;
        geometry::is_at_border(cell3(&cell)?, size, sides).map_err(err)
    });
    engine.register_fn("is_at_border", |cell: Array, size: Array, sides: &str| -> RResult<bool> {
        let s = cell3(&size)?;
        if s.iter().any(|&v| v <= 0) {
            return Err("domain size must be positive".into());
        }
        geometry::is_at_border(cell3(&cell)?, s.map(|v| v as usize), sides).map_err(err)
    });
    let st = state.clone();
    engine.register_fn("domain_size", move || -> RResult<Array> {
        let s = st.domain_size.get().ok_or("domain size not known yet")?;
        Ok(to_array(s.map(|v| v as i64)))
    });
}

fn register_views(engine: &mut Engine) {
    engine
        .register_type_with_name::<ArrayView>("ArrayView")
        .register_get("shape", |v: &mut ArrayView| to_array(v.0.shape().map(|d| d as i64)))
        .register_fn("len", |v: &mut ArrayView| v.0.descriptor().len() as i64)
        .register_fn("is_writable", |v: &mut ArrayView| v.0.descriptor().writable)
        .register_indexer_get(|v: &mut ArrayView, idx: Array| -> RResult<f64> {
            let i = view_index(v, &idx)?;
            v.0.get(i).ok_or_else(|| "index out of range".into())
        })
        .register_indexer_set(|v: &mut ArrayView, idx: Array, x: f64| -> RResult<()> {
            let i = view_index(v, &idx)?;
            v.0.set(i, x).map_err(err)
        })
        .register_indexer_set(|v: &mut ArrayView, idx: Array, x: i64| -> RResult<()> {
            let i = view_index(v, &idx)?;
            v.0.set(i, x as f64).map_err(err)
        })
        .register_fn("get", |v: &mut ArrayView, x: i64, y: i64, z: i64, f: i64| -> RResult<f64> {
            let i = view_index(v, &to_array([x, y, z, f]))?;
            v.0.get(i).ok_or_else(|| "index out of range".into())
        })
        .register_fn("set", |v: &mut ArrayView, x: i64, y: i64, z: i64, f: i64, val: Dynamic| -> RResult<()> {
            let i = view_index(v, &to_array([x, y, z, f]))?;
            v.0.set(i, num(&val)?).map_err(err)
        })
        .register_fn("component", |v: &mut ArrayView, f: i64| -> RResult<ArrayView> {
            let c = usize::try_from(f).ok().and_then(|f| v.0.component(f));
            c.map(ArrayView).ok_or_else(|| format!("component {f} out of range").into())
        })
        .register_fn("max", |v: &mut ArrayView| v.0.max())
        .register_fn("min", |v: &mut ArrayView| v.0.min())
        .register_fn("sum", |v: &mut ArrayView| v.0.sum())
        .register_fn("fill", |v: &mut ArrayView, x: Dynamic| -> RResult<()> { v.0.fill(num(&x)?).map_err(err) })
        .register_fn("to_array", |v: &mut ArrayView| to_array(v.0.to_vec()))
        .register_fn("read_only", |v: &mut ArrayView| ArrayView(v.0.read_only()));

    engine
        .register_type_with_name::<BlockCollection>("BlockCollection")
        .register_iterator::<BlockCollection>()
        .register_fn("len", |c: &mut BlockCollection| c.handles().len() as i64)
        .register_indexer_get(|c: &mut BlockCollection, i: i64| -> RResult<BlockHandle> {
            let hs = c.handles();
            usize::try_from(i)
                .ok()
                .and_then(|i| hs.into_iter().nth(i))
                .ok_or_else(|| format!("no local block {i}").into())
        })
        .register_get("cell_count", |c: &mut BlockCollection| {
            to_array(c.storage.cell_count().map(|v| v as i64))
        });

    engine
        .register_type_with_name::<BlockHandle>("Block")
        .register_indexer_get(|b: &mut BlockHandle, name: &str| -> RResult<ArrayView> {
            let f = b.0.field(name).map_err(err)?;
            Ok(ArrayView(SharedArrayView::new(f.clone(), true)))
        })
        .register_fn("with_ghosts", |b: &mut BlockHandle, name: &str| -> RResult<ArrayView> {
            let f = b.0.field(name).map_err(err)?.clone();
            let desc = {
                let g = f.read();
                g.export_slice(g.full_interval(), true).map_err(err)?
            };
            Ok(ArrayView(SharedArrayView::from_descriptor(f, desc)))
        })
        .register_get("id", |b: &mut BlockHandle| b.0.id() as i64)
        .register_get("min", |b: &mut BlockHandle| to_array(b.0.interval().min))
        .register_get("size", |b: &mut BlockHandle| to_array(b.0.size().map(|v| v as i64)))
        .register_fn("fields", |b: &mut BlockHandle| {
            b.0.field_names().map(|n| Dynamic::from(n.to_string())).collect::<Array>()
        })
        .register_fn("to_global", |b: &mut BlockHandle, local: Array| -> RResult<Array> {
            let l = cell3(&local)?;
            Ok(to_array(b.0.to_global(l.map(|v| v as isize))))
        });
}

fn register_collectives(engine: &mut Engine, state: &Rc<HostState>) {
    let parse = |op: &str| ReduceOp::parse(op).ok_or_else(|| err(format!("unknown reduce op {op:?}")));
    let st = state.clone();
    let reduce = move |v: f64, op: &str| -> RResult<Dynamic> {
        let r = reduce_scalar(&*st.transport, v, parse(op)?).map_err(err)?;
        Ok(r.map(Dynamic::from_float).unwrap_or(Dynamic::UNIT))
    };
    let r2 = reduce.clone();
    engine.register_fn("reduce", reduce);
    engine.register_fn("reduce", move |v: i64, op: &str| r2(v as f64, op));
    let st = state.clone();
    engine.register_fn("allreduce", move |v: Dynamic, op: &str| -> RResult<f64> {
        allreduce_scalar(&*st.transport, num(&v)?, parse(op)?).map_err(err)
    });
    let st = state.clone();
    engine.register_fn("barrier", move || barrier(&*st.transport).map_err(err));
    let st = state.clone();
    engine.register_fn("rank", move || st.transport.rank() as i64);
    let st = state.clone();
    engine.register_fn("worker_count", move || st.transport.size() as i64);
    let st = state.clone();
    engine.register_fn(
        "gather_slice",
        move |blocks: BlockCollection, field: &str, f: i64, through: Array, axis: &str, coarsen: i64| -> RResult<Dynamic> {
            let line = LineSpec {
                free_axis: axis_of(axis)?,
                fixed: cell3(&through)?,
            };
            let f = usize::try_from(f).map_err(err)?;
            let c = usize::try_from(coarsen).map_err(err)?;
            let r = gather_slice(&blocks.storage, line, field, f, c, &*st.transport).map_err(err)?;
            Ok(r.map(|v| Dynamic::from_array(to_array(v))).unwrap_or(Dynamic::UNIT))
        },
    );
}

fn json_number(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(x).map(serde_json::Value::Number).unwrap_or(serde_json::Value::Null)
}

fn register_output(engine: &mut Engine, state: &Rc<HostState>) {
    let st = state.clone();
    engine.on_print(move |s| {
        st.emit(s);
        st.emit("\n");
    });
    let st = state.clone();
    engine.on_debug(move |s, _, _| {
        st.emit(s);
        st.emit("\n");
    });
    let st = state.clone();
    engine.register_fn("send_frame", move |kind: &str, payload: &str| -> RResult<()> {
        if kind.is_empty() || kind.chars().any(char::is_whitespace) {
            return Err(format!("bad frame content type {kind:?}").into());
        }
        st.emit(&String::from_utf8_lossy(&frame_reply(kind, payload.as_bytes())));
        Ok(())
    });
    let st = state.clone();
    engine.register_fn(
        "slice_frame",
        move |name: &str, axis: &str, coarsen: i64, values: Array| -> RResult<()> {
            let vals = values.iter().map(|v| num(v).map(json_number)).collect::<RResult<Vec<_>>>()?;
            let body = serde_json::json!({ "name": name, "axis": axis, "coarsen": coarsen, "values": vals });
            st.emit(&String::from_utf8_lossy(&frame_reply("slice/json", body.to_string().as_bytes())));
            Ok(())
        },
    );
    let st = state.clone();
    engine.register_fn("metric_frame", move |name: &str, value: Dynamic| -> RResult<()> {
        let body = serde_json::json!({ "name": name, "step": st.step.get(), "value": json_number(num(&value)?) });
        st.emit(&String::from_utf8_lossy(&frame_reply("metric/json", body.to_string().as_bytes())));
        Ok(())
    });

    engine
        .register_type_with_name::<ResultLog>("ResultLog")
        .register_fn("result", |l: &mut ResultLog, name: &str, v: f64| l.record(name, ResultValue::Real(v)))
        .register_fn("result", |l: &mut ResultLog, name: &str, v: i64| l.record(name, ResultValue::Real(v as f64)))
        .register_fn("result", |l: &mut ResultLog, name: &str, v: &str| {
            l.record(name, ResultValue::Text(v.to_string()))
        });
}

fn register_control(engine: &mut Engine, state: &Rc<HostState>) {
    let st = state.clone();
    engine.register_fn("callback", move |name: &str, f: FnPtr| -> RResult<()> {
        let mut cbs = st.callbacks.borrow_mut();
        if cbs.contains_key(name) {
            return Err(format!("duplicate callback registration: {name}").into());
        }
        cbs.insert(name.to_string(), f);
        Ok(())
    });
    let st = state.clone();
    engine.register_fn("resume", move || st.action.set(ConsoleAction::Resume));
    let st = state.clone();
    engine.register_fn("shutdown", move || st.action.set(ConsoleAction::Shutdown));
    let st = state.clone();
    engine.register_fn("current_step", move || st.step.get() as i64);
    let st = state.clone();
    engine.register_fn("param", move |name: &str| -> RResult<f64> {
        st.params.borrow().get(name).copied().ok_or_else(|| format!("unknown parameter {name}").into())
    });
    let st = state.clone();
    let set = move |name: &str, v: f64| -> RResult<()> {
        match st.params.borrow_mut().get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(format!("unknown parameter {name}").into()),
        }
    };
    let set2 = set.clone();
    engine.register_fn("set_param", set);
    engine.register_fn("set_param", move |name: &str, v: i64| set2(name, v as f64));
}

/// Unit names and `log` resolve unless the script has its own variable of
/// that name in scope.
#[allow(deprecated)]
fn register_variables(engine: &mut Engine, state: &Rc<HostState>) {
    let st = state.clone();
    engine.on_var(move |name, _, ctx| {
        if ctx.scope().contains(name) {
            return Ok(None);
        }
        if name == "log" {
            return Ok(Some(Dynamic::from(ResultLog(st.clone()))));
        }
        match name {
            "m" | "kg" | "s" | "N" | "Pa" => {
                let dims = unit_dims(name).expect("known unit");
                Ok(Some(Dynamic::from(Quantity::new(1.0, dims).map_err(err)?)))
            }
            _ => Ok(None),
        }
    });
}

pub(crate) fn build_engine(state: &Rc<HostState>) -> Engine {
    let mut engine = Engine::new();
    engine.set_max_expr_depths(256, 256);
    register_units(&mut engine);
    register_geometry(&mut engine, state);
    register_views(&mut engine);
    register_collectives(&mut engine, state);
    register_output(&mut engine, state);
    register_control(&mut engine, state);
    register_variables(&mut engine, state);
    engine
}
