use blockforge_core::unitsconfig::{ConfigTree, ConfigValue, Quantity};
use rhai::{Array, Dynamic, Map};

use crate::ScriptError;

pub(crate) fn number(v: &Dynamic) -> Option<f64> {
    v.as_float().ok().or_else(|| v.as_int().ok().map(|i| i as f64))
}

fn conversion(path: &str, message: impl Into<String>) -> ScriptError {
    ScriptError::Conversion {
        path: if path.is_empty() { "<root>".into() } else { path.into() },
        message: message.into(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}/{key}")
    }
}

fn value_from_dynamic(v: &Dynamic, path: &str) -> Result<ConfigValue, ScriptError> {
    if let Some(q) = v.clone().try_cast::<Quantity>() {
        return Ok(ConfigValue::Quantity(q));
    }
    if let Some(x) = number(v) {
        return Ok(ConfigValue::Number(x));
    }
    if let Ok(b) = v.as_bool() {
        return Ok(ConfigValue::Bool(b));
    }
    if v.is_string() {
        return Ok(ConfigValue::Str(v.clone().into_string().unwrap_or_default()));
    }
    if v.is_array() {
        let a = v.clone().into_array().unwrap_or_default();
        return a
            .iter()
            .enumerate()
            .map(|(i, x)| value_from_dynamic(x, &format!("{path}[{i}]")))
            .collect::<Result<Vec<_>, _>>()
            .map(ConfigValue::List);
    }
    if v.is_map() {
        return tree_from_map(&v.clone().cast::<Map>(), path).map(ConfigValue::Tree);
    }
    Err(conversion(path, format!("cannot convert a value of type {}", v.type_name())))
}

fn tree_from_map(map: &Map, path: &str) -> Result<ConfigTree, ScriptError> {
    let mut t = ConfigTree::new();
    for (k, v) in map {
        t.insert(k.as_str(), value_from_dynamic(v, &join(path, k))?);
    }
    Ok(t)
}

/// Converts the value returned by a `config` callback.
pub fn config_from_dynamic(value: &Dynamic) -> Result<ConfigTree, ScriptError> {
    if !value.is_map() {
        return Err(ScriptError::NotAMapping(value.type_name().to_string()));
    }
    tree_from_map(&value.clone().cast::<Map>(), "")
}

fn value_to_dynamic(v: &ConfigValue) -> Dynamic {
    match v {
        ConfigValue::Quantity(q) => Dynamic::from(*q),
        ConfigValue::Number(x) => Dynamic::from_float(*x),
        ConfigValue::Str(s) => s.clone().into(),
        ConfigValue::Bool(b) => Dynamic::from_bool(*b),
        ConfigValue::List(l) => Dynamic::from_array(l.iter().map(value_to_dynamic).collect()),
        ConfigValue::Tree(t) => config_to_dynamic(t),
    }
}

/// Script-side copy of a config tree as nested maps.
pub fn config_to_dynamic(tree: &ConfigTree) -> Dynamic {
    let map: Map = tree.entries().iter().map(|(k, v)| (k.as_str().into(), value_to_dynamic(v))).collect();
    Dynamic::from_map(map)
}

/// Boundary request from `domain_init`, e.g. `['pressure', 1.001]` or `'NoSlip'`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    pub name: String,
    /// Parameters flattened in order; nested number lists are spliced in.
    pub params: Vec<f64>,
}

/// Per-cell initial state returned by `domain_init`. Absent keys keep the
/// defaults (fluid, fill level 1, host initial density and velocity).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainInit {
    pub fill_level: Option<f64>,
    pub boundary: Option<BoundarySpec>,
    pub init_vel: Option<[f64; 3]>,
    pub init_density: Option<f64>,
}

pub const DOMAIN_INIT_KEYS: [&str; 4] = ["fill_level", "boundary", "initVel", "initDensity"];

fn bad_init(key: &str, message: impl Into<String>) -> ScriptError {
    ScriptError::BadInitValue {
        key: key.into(),
        message: message.into(),
    }
}

fn flatten_numbers(v: &Dynamic, key: &str, out: &mut Vec<f64>) -> Result<(), ScriptError> {
    if let Some(x) = number(v) {
        out.push(x);
        return Ok(());
    }
    if v.is_array() {
        for x in v.clone().cast::<Array>() {
            flatten_numbers(&x, key, out)?;
        }
        return Ok(());
    }
    Err(bad_init(key, format!("expected a number, got {}", v.type_name())))
}

fn boundary_from(v: &Dynamic) -> Result<BoundarySpec, ScriptError> {
    const KEY: &str = "boundary";
    if v.is_string() {
        return Ok(BoundarySpec {
            name: v.clone().into_string().unwrap_or_default(),
            params: vec![],
        });
    }
    let Some(items) = v.clone().try_cast::<Array>() else {
        return Err(bad_init(KEY, format!("expected a name or [name, params...], got {}", v.type_name())));
    };
    let Some(name) = items.first().filter(|n| n.is_string()) else {
        return Err(bad_init(KEY, "list must start with the boundary name"));
    };
    let mut params = Vec::new();
    for p in &items[1..] {
        flatten_numbers(p, KEY, &mut params)?;
    }
    Ok(BoundarySpec {
        name: name.clone().into_string().unwrap_or_default(),
        params,
    })
}

impl DomainInit {
    pub fn from_dynamic(v: &Dynamic) -> Result<Self, ScriptError> {
        if v.is_unit() {
            return Ok(Self::default());
        }
        let Some(map) = v.clone().try_cast::<Map>() else {
            return Err(bad_init("<result>", format!("expected a mapping, got {}", v.type_name())));
        };
        let mut out = DomainInit::default();
        for (k, v) in &map {
            match k.as_str() {
                "fill_level" => {
                    let fl = number(v).ok_or_else(|| bad_init(k, "expected a number"))?;
                    if !(0.0..=1.0).contains(&fl) {
                        return Err(ScriptError::FillOutOfRange(fl));
                    }
                    out.fill_level = Some(fl);
                }
                "boundary" => out.boundary = Some(boundary_from(v)?),
                "initVel" => {
                    let mut u = Vec::new();
                    flatten_numbers(v, k, &mut u)?;
                    let u: [f64; 3] = u.try_into().map_err(|_| bad_init(k, "expected 3 numbers"))?;
                    out.init_vel = Some(u);
                }
                "initDensity" => out.init_density = Some(number(v).ok_or_else(|| bad_init(k, "expected a number"))?),
                other => return Err(ScriptError::UnknownKey(other.to_string())),
            }
        }
        Ok(out)
    }
}
