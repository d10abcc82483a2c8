use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use blockforge_core::comms::Transport;
use blockforge_core::field::{SharedArrayView, SharedField};
use blockforge_core::freesurface::Bubble;
use blockforge_core::unitsconfig::{ConfigTree, LatticeScale};
use blockforge_steering::{heuristic_complete, CommandInterpreter, CommandOutcome, ConsoleAction};
use rhai::{Dynamic, Engine, EvalAltResult, FnPtr, ParseErrorType, Position, Scope, AST};

use crate::bindings::{build_engine, ArrayView, BlockCollection, HostState, ResultSink, ResultValue};
use crate::convert::{config_from_dynamic, config_to_dynamic, DomainInit};
use crate::ScriptError;

pub const CONFIG: &str = "config";
pub const DOMAIN_INIT: &str = "domain_init";
pub const AT_END_OF_TIMESTEP: &str = "at_end_of_timestep";

/// Callback names registered by a scenario, mapped to their script functions.
#[derive(Clone, Default)]
pub struct CallbackRegistry {
    entries: BTreeMap<String, FnPtr>,
}

impl CallbackRegistry {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl std::fmt::Debug for CallbackRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.entries.keys()).finish()
    }
}

/// Host objects that can be handed to scripts.
pub enum HostObject {
    Blocks(BlockCollection),
    Field(SharedField),
    Scale(LatticeScale),
    Config(ConfigTree),
    Scalar(f64),
    Text(String),
    Bubbles(Vec<Bubble>),
}

impl HostObject {
    fn kind(&self) -> &'static str {
        match self {
            HostObject::Blocks(_) => "block collection",
            HostObject::Field(_) => "field",
            HostObject::Scale(_) => "lattice scale",
            HostObject::Config(_) => "config tree",
            HostObject::Scalar(_) => "scalar",
            HostObject::Text(_) => "string",
            HostObject::Bubbles(_) => "bubble table",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposeMode {
    ByReference,
    ByCopy,
}

/// A named value bound into a script, either a live proxy or a snapshot.
#[derive(Clone)]
pub struct Exposure {
    pub name: String,
    pub mode: ExposeMode,
    value: Dynamic,
}

/// Wraps a host object for scripts. Blocks and fields go by reference (live,
/// zero-copy); value kinds only by copy. A field may also be copied.
pub fn host_expose(name: &str, object: HostObject, mode: ExposeMode) -> Result<Exposure, ScriptError> {
    let kind = object.kind();
    let value = match (object, mode) {
        (HostObject::Blocks(b), ExposeMode::ByReference) => Dynamic::from(b),
        (HostObject::Field(f), ExposeMode::ByReference) => Dynamic::from(ArrayView(SharedArrayView::new(f, true))),
        (HostObject::Field(f), ExposeMode::ByCopy) => {
            let copy = f.read().clone().into_shared();
            Dynamic::from(ArrayView(SharedArrayView::new(copy, true)))
        }
        (HostObject::Blocks(_), ExposeMode::ByCopy) => return Err(ScriptError::NotByCopy(kind)),
        (_, ExposeMode::ByReference) => return Err(ScriptError::NotByReference(kind)),
        (HostObject::Scale(s), _) => Dynamic::from(s),
        (HostObject::Config(c), _) => config_to_dynamic(&c),
        (HostObject::Scalar(x), _) => Dynamic::from_float(x),
        (HostObject::Text(s), _) => s.into(),
        (HostObject::Bubbles(bs), _) => Dynamic::from_array(
            bs.iter()
                .map(|b| {
                    let mut m = rhai::Map::new();
                    m.insert("id".into(), Dynamic::from_int(b.id as i64));
                    m.insert("v0".into(), Dynamic::from_float(b.v0));
                    m.insert("v".into(), Dynamic::from_float(b.v));
                    m.insert("pressure".into(), Dynamic::from_float(b.pressure()));
                    Dynamic::from_map(m)
                })
                .collect(),
        ),
    };
    Ok(Exposure {
        name: name.to_string(),
        mode,
        value,
    })
}

fn load_error(e: &EvalAltResult) -> ScriptError {
    ScriptError::Load {
        line: e.position().line().unwrap_or(0),
        message: e.to_string(),
    }
}

/// One interpreter. Each worker owns its own; nothing is shared between them.
pub struct ScriptHost {
    engine: Engine,
    ast: AST,
    scope: Scope<'static>,
    state: Rc<HostState>,
}

impl ScriptHost {
    /// Interpreter without a scenario, e.g. for tests or a bare console.
    pub fn new(transport: Rc<dyn Transport>) -> Self {
        let state = Rc::new(HostState::new(transport));
        Self {
            engine: build_engine(&state),
            ast: AST::empty(),
            scope: Scope::new(),
            state,
        }
    }

    /// Reads, compiles and runs a scenario file; the `config` callback is required.
    pub fn load_scenario(path: impl AsRef<Path>, transport: Rc<dyn Transport>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_source(&source, transport)
    }

    pub fn from_source(source: &str, transport: Rc<dyn Transport>) -> Result<Self, ScriptError> {
        let mut host = Self::new(transport);
        host.ast = host.engine.compile(source).map_err(|e| ScriptError::Load {
            line: e.position().line().unwrap_or(0),
            message: e.to_string(),
        })?;
        host.engine
            .run_ast_with_scope(&mut host.scope, &host.ast)
            .map_err(|e| load_error(&e))?;
        if !host.has_callback(CONFIG) {
            return Err(ScriptError::MissingConfig);
        }
        Ok(host)
    }

    pub fn registry(&self) -> CallbackRegistry {
        CallbackRegistry {
            entries: self.state.callbacks.borrow().clone(),
        }
    }

    pub fn has_callback(&self, name: &str) -> bool {
        self.state.callbacks.borrow().contains_key(name)
    }

    pub fn transport(&self) -> &Rc<dyn Transport> {
        &self.state.transport
    }

    /// Number of parameters a callback takes, not counting captured variables.
    fn arity(&self, f: &FnPtr) -> Option<usize> {
        self.ast
            .iter_functions()
            .filter(|m| m.name == f.fn_name())
            .map(|m| m.params.len().saturating_sub(f.curry().len()))
            .min()
    }

    fn call(&self, name: &str, args: Vec<Dynamic>) -> Result<Option<Dynamic>, ScriptError> {
        let Some(f) = self.state.callbacks.borrow().get(name).cloned() else {
            return Ok(None);
        };
        f.call::<Dynamic>(&self.engine, &self.ast, args)
            .map(Some)
            .map_err(|e| ScriptError::Runtime {
                name: name.to_string(),
                message: e.to_string(),
            })
    }

    /// Runs `config` and converts its mapping. Quantities stay dimensional.
    pub fn invoke_config(&mut self) -> Result<ConfigTree, ScriptError> {
        let v = self.call(CONFIG, vec![])?.ok_or(ScriptError::MissingConfig)?;
        config_from_dynamic(&v)
    }

    /// Makes `is_at_border(cell, sides)` and `domain_size()` usable.
    pub fn set_domain_size(&mut self, size: [usize; 3]) {
        self.state.domain_size.set(Some(size));
    }

    pub fn has_domain_init(&self) -> bool {
        self.has_callback(DOMAIN_INIT)
    }

    /// Initial state of one global cell; defaults when `domain_init` is absent.
    pub fn invoke_domain_init(&mut self, cell: [i64; 3]) -> Result<DomainInit, ScriptError> {
        let arg = Dynamic::from_array(cell.iter().map(|&c| Dynamic::from_int(c)).collect());
        match self.call(DOMAIN_INIT, vec![arg])? {
            Some(v) => DomainInit::from_dynamic(&v),
            None => Ok(DomainInit::default()),
        }
    }

    /// Runs a named callback with the exposures as positional arguments. A
    /// callback declaring fewer parameters receives the leading ones. Absent
    /// callbacks are a no-op.
    pub fn invoke_callback(&mut self, name: &str, exposures: &[Exposure]) -> Result<(), ScriptError> {
        let Some(f) = self.state.callbacks.borrow().get(name).cloned() else {
            return Ok(());
        };
        let n = self.arity(&f).unwrap_or(exposures.len());
        if n > exposures.len() {
            return Err(ScriptError::Arity {
                name: name.to_string(),
                declared: n,
                exposed: exposures.len(),
            });
        }
        let args = exposures[..n].iter().map(|e| e.value.clone()).collect();
        self.call(name, args).map(|_| ())
    }

    /// Binds an exposure as a variable visible to console commands.
    pub fn expose_global(&mut self, exposure: &Exposure) {
        self.scope.set_or_push(exposure.name.clone(), exposure.value.clone());
    }

    /// Declares a steerable parameter that scripts can read with `param(name)`
    /// and change with `set_param(name, value)`.
    pub fn set_param(&mut self, name: &str, value: f64) {
        self.state.params.borrow_mut().insert(name.to_string(), value);
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.state.params.borrow().get(name).copied()
    }

    pub fn set_step(&mut self, step: u64) {
        self.state.step.set(step);
    }

    pub fn set_result_sink(&mut self, sink: Rc<dyn ResultSink>) {
        *self.state.sink.borrow_mut() = Some(sink);
    }

    /// Every `log.result` call so far as `(step, name, value)`.
    pub fn results(&self) -> Vec<(u64, String, ResultValue)> {
        self.state.results.borrow().clone()
    }

    /// Printed text and frames accumulated since the last call.
    pub fn take_output(&mut self) -> String {
        std::mem::take(&mut *self.state.output.borrow_mut())
    }

    /// Evaluates `text` in the persistent console scope, with the scenario's
    /// functions available.
    pub fn eval(&mut self, text: &str) -> Result<Dynamic, ScriptError> {
        let cmd = self.engine.compile_with_scope(&self.scope, text).map_err(|e| ScriptError::Load {
            line: e.position().line().unwrap_or(0),
            message: e.to_string(),
        })?;
        let merged = self.ast.clone_functions_only().merge(&cmd);
        // functions defined here stay callable from later commands
        self.ast = self.ast.merge(&cmd.clone_functions_only());
        self.engine
            .eval_ast_with_scope::<Dynamic>(&mut self.scope, &merged)
            .map_err(|e| ScriptError::Runtime {
                name: "<console>".into(),
                message: e.to_string(),
            })
    }
}

fn incomplete_parse(e: &ParseErrorType) -> bool {
    matches!(e, ParseErrorType::UnexpectedEOF)
        || matches!(e, ParseErrorType::BadInput(rhai::LexError::UnterminatedString))
}

impl CommandInterpreter for ScriptHost {
    fn is_complete(&self, text: &str) -> bool {
        if !heuristic_complete(text) {
            return false;
        }
        match self.engine.compile(text) {
            Ok(_) => true,
            Err(e) => !(incomplete_parse(e.err_type()) || e.position() == Position::NONE && text.trim().is_empty()),
        }
    }

    fn execute(&mut self, text: &str) -> CommandOutcome {
        self.state.action.set(ConsoleAction::Continue);
        let result = self.eval(text);
        let mut output = self.take_output();
        match result {
            Ok(v) if !v.is_unit() => {
                output.push_str(&v.to_string());
                output.push('\n');
            }
            Ok(_) => {}
            Err(e) => {
                output.push_str(&format!("error: {e}\n"));
            }
        }
        CommandOutcome {
            output,
            action: self.state.action.get(),
        }
    }
}
