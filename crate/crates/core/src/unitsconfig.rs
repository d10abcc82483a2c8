//! Physical quantities, lattice nondimensionalization, the time step solver
//! and configuration checks.
//!
//! Quantities carry exponents over length, mass and time. Text form:
//! `NUMBER ('*' UNIT)* ('/' UNIT)*` with units `m kg s N Pa`, optionally
//! raised to an integer power (`m^2`).

use std::fmt;

use thiserror::Error;

/// Base dimension indices.
pub const LENGTH: usize = 0;
pub const MASS: usize = 1;
pub const TIME: usize = 2;

const MAX_EXPONENT: i8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitsError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown unit '{unit}' at position {pos}")]
    UnknownUnit { pos: usize, unit: String },
    #[error("dimension exponent out of range [-8, 8]")]
    DimensionOverflow,
    #[error("incompatible dimensions {0:?} and {1:?}")]
    Incompatible([i8; 3], [i8; 3]),
    #[error("a mass scale (Physical/density) is required for {0}")]
    MissingMassScale(String),
    #[error("lattice scale must be positive: {0}")]
    BadScale(String),
    #[error("missing constraint: {0}")]
    MissingConstraint(String),
    #[error("no feasible time step: dt_min = {dt_min:e} s exceeds dt_max = {dt_max:e} s")]
    Infeasible { dt_min: f64, dt_max: f64 },
    #[error("missing configuration entry {0}")]
    MissingKey(String),
    #[error("{path}: {msg}")]
    BadEntry { path: String, msg: String },
}

pub type UnitsResult<T> = Result<T, UnitsError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantity {
    pub magnitude: f64,
    /// Exponents of (length, mass, time).
    pub dims: [i8; 3],
}

fn check_dims(d: [i32; 3]) -> UnitsResult<[i8; 3]> {
    if d.iter().any(|e| e.abs() > MAX_EXPONENT as i32) {
        return Err(UnitsError::DimensionOverflow);
    }
    Ok(d.map(|e| e as i8))
}

impl Quantity {
    pub fn new(magnitude: f64, dims: [i8; 3]) -> UnitsResult<Self> {
        check_dims(dims.map(i32::from))?;
        Ok(Self { magnitude, dims })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            magnitude: v,
            dims: [0; 3],
        }
    }

    pub fn length(v: f64) -> Self {
        Self {
            magnitude: v,
            dims: [1, 0, 0],
        }
    }

    pub fn time(v: f64) -> Self {
        Self {
            magnitude: v,
            dims: [0, 0, 1],
        }
    }

    pub fn is_dimensionless(&self) -> bool {
        self.dims == [0; 3]
    }

    pub fn mul(&self, o: &Quantity) -> UnitsResult<Quantity> {
        let d = [0, 1, 2].map(|i| self.dims[i] as i32 + o.dims[i] as i32);
        Ok(Quantity {
            magnitude: self.magnitude * o.magnitude,
            dims: check_dims(d)?,
        })
    }

    pub fn div(&self, o: &Quantity) -> UnitsResult<Quantity> {
        let d = [0, 1, 2].map(|i| self.dims[i] as i32 - o.dims[i] as i32);
        Ok(Quantity {
            magnitude: self.magnitude / o.magnitude,
            dims: check_dims(d)?,
        })
    }

    pub fn powi(&self, n: i32) -> UnitsResult<Quantity> {
        let d = self.dims.map(|e| e as i32 * n);
        Ok(Quantity {
            magnitude: self.magnitude.powi(n),
            dims: check_dims(d)?,
        })
    }

    pub fn scale(&self, f: f64) -> Quantity {
        Quantity {
            magnitude: self.magnitude * f,
            dims: self.dims,
        }
    }

    pub fn add(&self, o: &Quantity) -> UnitsResult<Quantity> {
        if self.dims != o.dims {
            return Err(UnitsError::Incompatible(self.dims, o.dims));
        }
        Ok(Quantity {
            magnitude: self.magnitude + o.magnitude,
            dims: self.dims,
        })
    }

    pub fn sub(&self, o: &Quantity) -> UnitsResult<Quantity> {
        self.add(&o.scale(-1.0))
    }
}

impl fmt::Display for Quantity {
    /// Canonical form `magnitude*kg^a*m^b*s^c/kg^d...`; parses back exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}", self.magnitude)?;
        let names = [(MASS, "kg"), (LENGTH, "m"), (TIME, "s")];
        let unit = |f: &mut fmt::Formatter<'_>, sep: &str, name: &str, e: i8| {
            if e == 1 {
                write!(f, "{sep}{name}")
            } else {
                write!(f, "{sep}{name}^{e}")
            }
        };
        for (i, name) in names {
            if self.dims[i] > 0 {
                unit(f, "*", name, self.dims[i])?;
            }
        }
        for (i, name) in names {
            if self.dims[i] < 0 {
                unit(f, "/", name, -self.dims[i])?;
            }
        }
        Ok(())
    }
}

/// Base dimensions of a unit symbol.
pub fn unit_dims(name: &str) -> Option<[i8; 3]> {
    Some(match name {
        "m" => [1, 0, 0],
        "kg" => [0, 1, 0],
        "s" => [0, 0, 1],
        "N" => [1, 1, -2],
        "Pa" => [-1, 1, -2],
        _ => return None,
    })
}

struct Lexer<'a> {
    text: &'a [u8],
    pos: usize,
}

impl Lexer<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn err(&self, msg: &str) -> UnitsError {
        UnitsError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn number(&mut self) -> UnitsResult<f64> {
        let start = self.pos;
        let digits = |l: &mut Self| {
            let s = l.pos;
            while l.peek().is_some_and(|c| c.is_ascii_digit()) {
                l.pos += 1;
            }
            l.pos > s
        };
        if matches!(self.peek(), Some(b'+' | b'-')) {
            self.pos += 1;
        }
        let int = digits(self);
        let mut frac = false;
        if self.peek() == Some(b'.') {
            self.pos += 1;
            frac = digits(self);
        }
        if !int && !frac {
            self.pos = start;
            return Err(self.err("expected a number"));
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if !digits(self) {
                self.pos = save;
                return Err(self.err("malformed exponent"));
            }
        }
        let s = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        s.parse().map_err(|_| UnitsError::Syntax {
            pos: start,
            msg: format!("bad number '{s}'"),
        })
    }

    fn unit(&mut self) -> UnitsResult<[i32; 3]> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a unit"));
        }
        let name = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        let dims = unit_dims(name).ok_or_else(|| UnitsError::UnknownUnit {
            pos: start,
            unit: name.into(),
        })?;
        self.skip_ws();
        let mut power = 1;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let ps = self.pos;
            if self.peek() == Some(b'-') {
                self.pos += 1;
            }
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            let s = std::str::from_utf8(&self.text[ps..self.pos]).unwrap();
            power = s.parse::<i32>().map_err(|_| UnitsError::Syntax {
                pos: ps,
                msg: "expected an integer power".into(),
            })?;
            if power.abs() > MAX_EXPONENT as i32 {
                return Err(UnitsError::DimensionOverflow);
            }
        }
        Ok(dims.map(|d| d as i32 * power))
    }
}

pub fn parse_quantity(text: &str) -> UnitsResult<Quantity> {
    let mut lx = Lexer {
        text: text.as_bytes(),
        pos: 0,
    };
    lx.skip_ws();
    let magnitude = lx.number()?;
    let mut dims = [0i32; 3];
    let mut dividing = false;
    loop {
        lx.skip_ws();
        let sign = match lx.peek() {
            None => break,
            Some(b'*') if !dividing => 1,
            Some(b'*') => return Err(lx.err("'*' after '/' is not allowed")),
            Some(b'/') => {
                dividing = true;
                -1
            }
            Some(_) => return Err(lx.err("expected '*' or '/'")),
        };
        lx.pos += 1;
        lx.skip_ws();
        let d = lx.unit()?;
        for i in 0..3 {
            dims[i] += sign * d[i];
        }
    }
    Ok(Quantity {
        magnitude,
        dims: check_dims(dims)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeScale {
    /// Cell size in m.
    pub dx: f64,
    /// Time step in s.
    pub dt: f64,
    /// Reference density in kg/m^3; needed only for mass-bearing quantities.
    pub rho0: Option<f64>,
}

impl LatticeScale {
    pub fn new(dx: f64, dt: f64, rho0: Option<f64>) -> UnitsResult<Self> {
        if !(dx > 0.0) || !(dt > 0.0) || rho0.is_some_and(|r| !(r > 0.0)) {
            return Err(UnitsError::BadScale(format!("dx={dx}, dt={dt}, rho0={rho0:?}")));
        }
        Ok(Self { dx, dt, rho0 })
    }
}

/// Lattice value `q / (dx^a M^b dt^c)` with `M = rho0 dx^3`.
pub fn to_lattice(q: &Quantity, scale: &LatticeScale) -> UnitsResult<f64> {
    let [a, b, c] = q.dims.map(i32::from);
    let mut unit = scale.dx.powi(a) * scale.dt.powi(c);
    if b != 0 {
        let rho0 = scale.rho0.ok_or_else(|| UnitsError::MissingMassScale(q.to_string()))?;
        unit *= (rho0 * scale.dx.powi(3)).powi(b);
    }
    Ok(q.magnitude / unit)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigValue {
    Quantity(Quantity),
    Number(f64),
    Str(String),
    Bool(bool),
    List(Vec<ConfigValue>),
    Tree(ConfigTree),
}

impl ConfigValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            ConfigValue::Number(v) => Some(*v),
            ConfigValue::Quantity(q) if q.is_dimensionless() => Some(q.magnitude),
            _ => None,
        }
    }

    pub fn as_tree(&self) -> Option<&ConfigTree> {
        match self {
            ConfigValue::Tree(t) => Some(t),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            ConfigValue::Quantity(q) => Value::String(q.to_string()),
            ConfigValue::Number(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
            ConfigValue::Str(s) => Value::String(s.clone()),
            ConfigValue::Bool(b) => Value::Bool(*b),
            ConfigValue::List(l) => Value::Array(l.iter().map(ConfigValue::to_json).collect()),
            ConfigValue::Tree(t) => t.to_json(),
        }
    }
}

/// Ordered key-value tree; keys are unique per level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigTree {
    entries: Vec<(String, ConfigValue)>,
}

impl ConfigTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a key at this level.
    pub fn insert(&mut self, key: impl Into<String>, value: ConfigValue) {
        let key = key.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn with(mut self, key: &str, value: ConfigValue) -> Self {
        self.insert(key, value);
        self
    }

    pub fn entries(&self) -> &[(String, ConfigValue)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&ConfigValue> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Lookup by slash-separated path, e.g. `Physical/viscosity`.
    pub fn lookup(&self, path: &str) -> Option<&ConfigValue> {
        let mut parts = path.split('/');
        let mut cur = self.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_tree()?.get(p)?;
        }
        Some(cur)
    }

    /// Sets a value by path, creating intermediate trees.
    pub fn set_path(&mut self, path: &str, value: ConfigValue) {
        match path.split_once('/') {
            None => self.insert(path, value),
            Some((head, rest)) => {
                if !matches!(self.get(head), Some(ConfigValue::Tree(_))) {
                    self.insert(head, ConfigValue::Tree(ConfigTree::new()));
                }
                if let Some((_, ConfigValue::Tree(t))) = self.entries.iter_mut().find(|(k, _)| k == head) {
                    t.set_path(rest, value);
                }
            }
        }
    }

    pub fn number(&self, path: &str) -> Option<f64> {
        self.lookup(path).and_then(ConfigValue::as_number)
    }

    pub fn quantity(&self, path: &str) -> Option<Quantity> {
        match self.lookup(path)? {
            ConfigValue::Quantity(q) => Some(*q),
            ConfigValue::Number(v) => Some(Quantity::scalar(*v)),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.entries {
            map.insert(k.clone(), v.to_json());
        }
        serde_json::Value::Object(map)
    }

    /// True if any leaf is a dimensioned quantity.
    pub fn has_quantities(&self) -> bool {
        fn walk(v: &ConfigValue) -> bool {
            match v {
                ConfigValue::Quantity(_) => true,
                ConfigValue::List(l) => l.iter().any(walk),
                ConfigValue::Tree(t) => t.has_quantities(),
                _ => false,
            }
        }
        self.entries.iter().any(|(_, v)| walk(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtConstraints {
    pub omega_cap: f64,
    pub u_cap: f64,
}

impl Default for DtConstraints {
    fn default() -> Self {
        Self {
            omega_cap: 1.95,
            u_cap: 0.05,
        }
    }
}

/// Bounds `(dt_min, dt_max)` in seconds from viscosity, cell size and peak velocity.
pub fn dt_bounds(nu: f64, dx: f64, u_max: f64, c: &DtConstraints) -> (f64, f64) {
    let nu_l_min = (1.0 / c.omega_cap - 0.5) / 3.0;
    (nu_l_min * dx * dx / nu, c.u_cap * dx / u_max)
}

fn physical(tree: &ConfigTree, key: &str, dims: [i8; 3]) -> UnitsResult<f64> {
    let path = format!("Physical/{key}");
    let q = tree.quantity(&path).ok_or_else(|| UnitsError::MissingKey(path.clone()))?;
    if q.dims != dims {
        return Err(UnitsError::BadEntry {
            path,
            msg: format!("expected dimensions {dims:?}, got {:?}", q.dims),
        });
    }
    Ok(q.magnitude)
}

/// Largest time step satisfying `omega_e <= omega_cap` and `u_L <= u_cap`.
///
/// Reads `Physical/viscosity`, `Physical/dx` and `Physical/u_max`.
pub fn find_optimal_dt(tree: &ConfigTree, c: &DtConstraints) -> UnitsResult<Quantity> {
    let nu = physical(tree, "viscosity", [2, 0, -1])?;
    let dx = physical(tree, "dx", [1, 0, 0])?;
    if tree.lookup("Physical/u_max").is_none() {
        return Err(UnitsError::MissingConstraint(
            "Physical/u_max not set, dt is unbounded above".into(),
        ));
    }
    let u_max = physical(tree, "u_max", [1, 0, -1])?;
    let (dt_min, dt_max) = dt_bounds(nu, dx, u_max, c);
    if dt_min > dt_max {
        return Err(UnitsError::Infeasible { dt_min, dt_max });
    }
    Ok(Quantity::time(dt_max))
}

/// Lattice scale from `Physical/dx`, `Physical/dt` and optional `Physical/density`.
pub fn lattice_scale(tree: &ConfigTree) -> UnitsResult<LatticeScale> {
    let dx = physical(tree, "dx", [1, 0, 0])?;
    let dt = physical(tree, "dt", [0, 0, 1])?;
    let rho0 = match tree.lookup("Physical/density") {
        Some(_) => Some(physical(tree, "density", [-3, 1, 0])?),
        None => None,
    };
    LatticeScale::new(dx, dt, rho0)
}

/// Replaces every quantity leaf by its lattice value; other leaves are kept.
pub fn nondimensionalize_tree(tree: &ConfigTree, scale: &LatticeScale) -> UnitsResult<ConfigTree> {
    fn conv(v: &ConfigValue, scale: &LatticeScale, path: &str) -> UnitsResult<ConfigValue> {
        Ok(match v {
            ConfigValue::Quantity(q) => ConfigValue::Number(to_lattice(q, scale).map_err(|e| UnitsError::BadEntry {
                path: path.into(),
                msg: e.to_string(),
            })?),
            ConfigValue::List(l) => ConfigValue::List(
                l.iter()
                    .enumerate()
                    .map(|(i, v)| conv(v, scale, &format!("{path}/{i}")))
                    .collect::<UnitsResult<_>>()?,
            ),
            ConfigValue::Tree(t) => ConfigValue::Tree(walk(t, scale, path)?),
            other => other.clone(),
        })
    }
    fn walk(t: &ConfigTree, scale: &LatticeScale, prefix: &str) -> UnitsResult<ConfigTree> {
        let mut out = ConfigTree::new();
        for (k, v) in &t.entries {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}/{k}") };
            out.insert(k.clone(), conv(v, scale, &path)?);
        }
        Ok(out)
    }
    walk(tree, scale, "")
}

/// Nondimensionalizes with the scale found in the tree itself. A tree without
/// quantities is returned unchanged.
pub fn nondimensionalize(tree: &ConfigTree) -> UnitsResult<ConfigTree> {
    if !tree.has_quantities() {
        return Ok(tree.clone());
    }
    nondimensionalize_tree(tree, &lattice_scale(tree)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

/// Relaxation rate for a lattice viscosity.
pub fn omega_from_viscosity(nu_l: f64) -> f64 {
    1.0 / (3.0 * nu_l + 0.5)
}

/// Range and consistency checks on a nondimensionalized tree. `Physical/omega`
/// is checked when given, otherwise the rate implied by `Physical/viscosity`.
pub fn validate_config(tree: &ConfigTree) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |path: &str, message: String| {
        out.push(Diagnostic {
            path: path.into(),
            message,
        })
    };
    for (path, v) in leaves(tree) {
        if let ConfigValue::Quantity(q) = v {
            if !q.is_dimensionless() {
                diag(&path, format!("still carries units ({q})"));
            }
        }
    }
    let omega = tree
        .number("Physical/omega")
        .map(|w| ("Physical/omega", w))
        .or_else(|| tree.number("Physical/viscosity").map(|nu| ("Physical/viscosity", omega_from_viscosity(nu))));
    if let Some((path, w)) = omega {
        if !(w > 0.0 && w < 2.0) {
            diag(path, format!("relaxation rate {w} outside (0, 2)"));
        }
    }
    match tree.number("Control/timesteps") {
        Some(n) if n >= 1.0 && n.fract() == 0.0 => {}
        Some(n) => diag("Control/timesteps", format!("must be an integer >= 1, got {n}")),
        None => diag("Control/timesteps", "missing".into()),
    }
    if let Some(n) = tree.number("Control/vtk_output_interval") {
        if !(n >= 1.0 && n.fract() == 0.0) {
            diag("Control/vtk_output_interval", format!("must be an integer >= 1, got {n}"));
        }
    }
    if let Some(s) = tree.number("Physical/surface_tension") {
        if !(s >= 0.0) {
            diag("Physical/surface_tension", format!("must be >= 0, got {s}"));
        }
    }
    out
}

/// All leaves with their slash paths, depth first.
pub fn leaves(tree: &ConfigTree) -> Vec<(String, &ConfigValue)> {
    fn rec<'a>(v: &'a ConfigValue, path: String, out: &mut Vec<(String, &'a ConfigValue)>) {
        match v {
            ConfigValue::Tree(t) => {
                for (k, v) in &t.entries {
                    rec(v, format!("{path}/{k}"), out);
                }
            }
            ConfigValue::List(l) => {
                for (i, v) in l.iter().enumerate() {
                    rec(v, format!("{path}/{i}"), out);
                }
            }
            other => out.push((path, other)),
        }
    }
    let mut out = Vec::new();
    for (k, v) in &tree.entries {
        rec(v, k.clone(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> ConfigValue {
        ConfigValue::Quantity(parse_quantity(s).unwrap())
    }

    #[test]
    fn scenario_quantity_strings_parse() {
        let v = parse_quantity("1e-6*m*m/s").unwrap();
        assert_eq!((v.magnitude, v.dims), (1e-6, [2, 0, -1]));
        let st = parse_quantity("0.072*N/m").unwrap();
        assert_eq!((st.magnitude, st.dims), (0.072, [0, 1, -2]));
        let dx = parse_quantity("0.01*m").unwrap();
        assert_eq!((dx.magnitude, dx.dims), (0.01, [1, 0, 0]));
        assert_eq!(parse_quantity("5").unwrap(), Quantity::scalar(5.0));
        assert_eq!(parse_quantity(" 2 * Pa / m ^ 2").unwrap().dims, [-3, 1, -2]);
        assert_eq!(parse_quantity("1000*kg/m^3").unwrap().dims, [-3, 1, 0]);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_quantity("1*furlong"),
            Err(UnitsError::UnknownUnit {
                pos: 2,
                unit: "furlong".into()
            })
        );
        assert!(matches!(parse_quantity("m*2"), Err(UnitsError::Syntax { pos: 0, .. })));
        assert!(matches!(parse_quantity("1/s*m"), Err(UnitsError::Syntax { pos: 3, .. })));
        assert!(matches!(parse_quantity("1e*m"), Err(UnitsError::Syntax { .. })));
        assert!(matches!(parse_quantity("1*m^"), Err(UnitsError::Syntax { pos: 4, .. })));
        assert_eq!(parse_quantity("1*m^9"), Err(UnitsError::DimensionOverflow));
        assert_eq!(parse_quantity("1*m^5*m^4"), Err(UnitsError::DimensionOverflow));
    }

    #[test]
    fn display_round_trip() {
        for s in ["1e-6*m*m/s", "0.072*N/m", "5", "-3.25e12*kg*m^2/s^3", "0.1*Pa"] {
            let a = parse_quantity(s).unwrap();
            let b = parse_quantity(&a.to_string()).unwrap();
            assert_eq!(a.magnitude.to_bits(), b.magnitude.to_bits());
            assert_eq!(a.dims, b.dims);
        }
        assert_eq!(parse_quantity("0.072*N/m").unwrap().to_string(), "7.2e-2*kg/s^2");
    }

    #[test]
    fn lattice_conversions() {
        let scale = LatticeScale::new(0.01, 1e-3, None).unwrap();
        let nu = parse_quantity("1e-6*m*m/s").unwrap();
        let oracle = 1e-6 * 1e-3 / (0.01 * 0.01);
        assert!((to_lattice(&nu, &scale).unwrap() - oracle).abs() <= 1e-15 * oracle);
        assert!((oracle - 1e-5).abs() < 1e-18);
        assert_eq!(to_lattice(&Quantity::scalar(3.5), &scale).unwrap(), 3.5);
        let sigma = parse_quantity("0.072*N/m").unwrap();
        assert!(matches!(to_lattice(&sigma, &scale), Err(UnitsError::MissingMassScale(_))));
        let scale = LatticeScale::new(0.01, 5e-4, Some(1000.0)).unwrap();
        let s = to_lattice(&sigma, &scale).unwrap();
        assert!((s - 0.072 / 4000.0).abs() <= 1e-15 * s);
        assert!(LatticeScale::new(0.0, 1.0, None).is_err());
    }

    fn channel() -> ConfigTree {
        let physical = ConfigTree::new()
            .with("viscosity", q("1e-6*m*m/s"))
            .with("surface_tension", q("0.072*N/m"))
            .with("dx", q("0.01*m"))
            .with("density", q("1000*kg/m^3"))
            .with("u_max", q("1e-3*m/s"));
        let control = ConfigTree::new()
            .with("timesteps", ConfigValue::Number(10000.0))
            .with("vtk_output_interval", ConfigValue::Number(100.0))
            .with("name", ConfigValue::Str("channel".into()));
        ConfigTree::new()
            .with("Physical", ConfigValue::Tree(physical))
            .with("Control", ConfigValue::Tree(control))
    }

    #[test]
    fn optimal_dt_examples() {
        let c = DtConstraints::default();
        let mut t = channel();
        let dt = find_optimal_dt(&t, &c).unwrap();
        assert_eq!(dt.dims, [0, 0, 1]);
        assert!((dt.magnitude - 0.5).abs() < 1e-15);
        t.set_path("Physical/u_max", q("1*m/s"));
        match find_optimal_dt(&t, &c) {
            Err(UnitsError::Infeasible { dt_min, dt_max }) => {
                assert!((dt_min - 0.42735).abs() < 1e-4);
                assert!((dt_max - 5e-4).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        let mut t = channel();
        t.set_path("Physical", ConfigValue::Tree(ConfigTree::new().with("viscosity", q("1e-6*m*m/s")).with("dx", q("0.01*m"))));
        assert!(matches!(find_optimal_dt(&t, &c), Err(UnitsError::MissingConstraint(_))));
    }

    #[test]
    fn nondimensionalize_channel() {
        let mut t = channel();
        let dt = find_optimal_dt(&t, &DtConstraints::default()).unwrap();
        t.set_path("Physical/dt", ConfigValue::Quantity(dt));
        let nd = nondimensionalize(&t).unwrap();
        assert!(!nd.has_quantities());
        assert!(leaves(&nd).iter().all(|(_, v)| !matches!(v, ConfigValue::Quantity(_))));
        assert_eq!(nd.number("Physical/dx"), Some(1.0));
        assert_eq!(nd.number("Physical/dt"), Some(1.0));
        assert_eq!(nd.number("Control/timesteps"), Some(10000.0));
        assert_eq!(nd.lookup("Control/name"), Some(&ConfigValue::Str("channel".into())));
        assert!((nd.number("Physical/u_max").unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(nondimensionalize(&nd).unwrap(), nd);
        assert!(validate_config(&nd).is_empty(), "{:?}", validate_config(&nd));
        let plain = ConfigTree::new().with("a", ConfigValue::Number(1.0));
        assert_eq!(nondimensionalize(&plain).unwrap(), plain);
    }

    #[test]
    fn validation_diagnostics() {
        let good = ConfigTree::new()
            .with("Physical", ConfigValue::Tree(ConfigTree::new().with("omega", ConfigValue::Number(1.8))))
            .with("Control", ConfigValue::Tree(ConfigTree::new().with("timesteps", ConfigValue::Number(10.0))));
        assert!(validate_config(&good).is_empty());
        let mut bad = good.clone();
        bad.set_path("Physical/omega", ConfigValue::Number(2.1));
        let d = validate_config(&bad);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].path, "Physical/omega");
        let mut bad = good.clone();
        bad.set_path("Control/timesteps", ConfigValue::Number(-5.0));
        bad.set_path("Physical/surface_tension", ConfigValue::Number(-0.1));
        let d = validate_config(&bad);
        let paths: Vec<_> = d.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(paths, ["Control/timesteps", "Physical/surface_tension"]);
        let mut units = good;
        units.set_path("Physical/dx", q("0.01*m"));
        assert_eq!(validate_config(&units)[0].path, "Physical/dx");
    }

    #[test]
    fn tree_paths_and_json() {
        let mut t = ConfigTree::new();
        t.set_path("A/b/c", ConfigValue::Bool(true));
        t.set_path("A/b/c", ConfigValue::Number(2.0));
        t.set_path("A/x", ConfigValue::List(vec![ConfigValue::Number(1.0), q("2*s")]));
        assert_eq!(t.number("A/b/c"), Some(2.0));
        assert_eq!(t.entries().len(), 1);
        assert_eq!(t.to_json().to_string(), r#"{"A":{"b":{"c":2.0},"x":[1.0,"2e0*s"]}}"#);
    }
}
