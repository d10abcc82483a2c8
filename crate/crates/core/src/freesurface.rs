//! Free-surface extension: fill levels, interface maintenance, free-boundary
//! reconstruction, mass advection, cell conversion and the bubble model.
//!
//! Liquid cells carry the `Fluid` flag. Interface cells track their mass `m`
//! and derive `phi = m / rho`; liquid cells hold `m = rho`, gas cells `m = 0`.
//! The interface layer is kept closed over the full stencil neighborhood, so
//! no liquid cell ever pulls a population from a gas cell.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use thiserror::Error;

use crate::blockgrid::{Block, BlockStorage, GridError};
use crate::comms::{
    accumulate_ghost_layers, broadcast_bytes, bytes_to_f64s, exchange_ghost_layers, f64s_to_bytes, gather_bytes,
    scatter_bytes, CommError, ExchangePlan, Transport,
};
use crate::field::{Field, Layout};
use crate::lbm::{
    collide_block, equilibrium_into, read_cell, stream_and_bounce, swap_pdfs, tag, LbmError, Stencil, TrtParams, FLAGS,
    PDF, PDF_TMP,
};

pub const FILL: &str = "fill";
pub const MASS: &str = "mass";
pub const MASS_DELTA: &str = "mass_delta";
pub const BUBBLE_ID: &str = "bubble_id";
pub const CONVERSION: &str = "conversion";
pub const FS_MACRO: &str = "fs_macro";
pub const CURVATURE: &str = "curvature";

/// Bubble id stored for cells that belong to no bubble.
pub const NO_BUBBLE: f64 = -1.0;

const FILL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FsError {
    #[error("fill level {value} at cell {cell:?} outside [0, 1]")]
    FillOutOfRange { value: f64, cell: [i64; 3] },
    #[error("gas cell {cell:?} next to an interface has no bubble id")]
    GasWithoutBubble { cell: [i64; 3] },
    #[error("bubble {0} is not registered")]
    UnknownBubble(u64),
    #[error("invalid free-surface parameter: {0}")]
    BadParams(String),
    #[error("inconsistent bubble labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Lbm(#[from] LbmError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type FsResult<T> = Result<T, FsError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeSurfaceParams {
    pub sigma: f64,
    pub epsilon: f64,
    pub relabel_interval: u64,
}

impl Default for FreeSurfaceParams {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            epsilon: 1e-2,
            relabel_interval: 100,
        }
    }
}

impl FreeSurfaceParams {
    pub fn new(sigma: f64, epsilon: f64, relabel_interval: u64) -> FsResult<Self> {
        if !(sigma >= 0.0) {
            return Err(FsError::BadParams(format!("surface tension {sigma} < 0")));
        }
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(FsError::BadParams(format!("conversion epsilon {epsilon} outside (0, 0.5)")));
        }
        if relabel_interval == 0 {
            return Err(FsError::BadParams("relabel interval must be positive".into()));
        }
        Ok(Self {
            sigma,
            epsilon,
            relabel_interval,
        })
    }

    /// Fill-level ghost layers: the curvature stencil needs two.
    pub fn fill_ghost_layers(&self) -> usize {
        if self.sigma > 0.0 {
            2
        } else {
            1
        }
    }
}

/// Exact floating-point accumulator. The running sum is kept as a list of
/// non-overlapping partials, so `value` is the correctly rounded total
/// independent of the order of additions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    pub fn partials(&self) -> &[f64] {
        &self.partials
    }

    pub fn from_partials(partials: &[f64]) -> Self {
        let mut s = Self::default();
        for &p in partials {
            s.add(p);
        }
        s
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // half-way case: round using the sign of the next partial
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bubble {
    pub id: u64,
    pub v0: f64,
    pub v: f64,
}

impl Bubble {
    /// `V0 / V`. A bubble without volume left is reported at reference pressure.
    pub fn pressure(&self) -> f64 {
        if self.v > 0.0 {
            self.v0 / self.v
        } else {
            1.0
        }
    }
}

/// Bubble table, replicated identically on every worker.
#[derive(Debug, Clone, PartialEq)]
pub struct BubbleRegistry {
    bubbles: BTreeMap<u64, Bubble>,
    next_id: u64,
}

impl Default for BubbleRegistry {
    fn default() -> Self {
        Self {
            bubbles: BTreeMap::new(),
            next_id: 1,
        }
    }
}

impl BubbleRegistry {
    pub fn get(&self, id: u64) -> Option<&Bubble> {
        self.bubbles.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Bubble> {
        self.bubbles.get_mut(&id)
    }

    pub fn bubbles(&self) -> impl Iterator<Item = &Bubble> {
        self.bubbles.values()
    }

    pub fn len(&self) -> usize {
        self.bubbles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bubbles.is_empty()
    }

    pub fn pressure(&self, id: u64) -> FsResult<f64> {
        self.get(id).map(Bubble::pressure).ok_or(FsError::UnknownBubble(id))
    }

    pub fn total_volume(&self) -> f64 {
        self.bubbles.values().map(|b| b.v).sum()
    }

    /// Merges two bubbles: volumes and initial volumes add, the smaller id survives.
    pub fn merge(&mut self, a: u64, b: u64) -> FsResult<u64> {
        let (keep, gone) = (a.min(b), a.max(b));
        if keep == gone {
            return Ok(keep);
        }
        let g = self.bubbles.remove(&gone).ok_or(FsError::UnknownBubble(gone))?;
        let k = self.bubbles.get_mut(&keep).ok_or(FsError::UnknownBubble(keep))?;
        k.v0 += g.v0;
        k.v += g.v;
        Ok(keep)
    }

    pub fn insert(&mut self, v0: f64, v: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.bubbles.insert(id, Bubble { id, v0, v });
        id
    }

    fn encode(&self) -> Vec<u8> {
        let mut vals = vec![self.next_id as f64];
        for b in self.bubbles.values() {
            vals.extend([b.id as f64, b.v0, b.v]);
        }
        f64s_to_bytes(&vals)
    }

    fn decode(bytes: &[u8]) -> FsResult<Self> {
        let vals = bytes_to_f64s(bytes)?;
        let mut r = BubbleRegistry {
            bubbles: BTreeMap::new(),
            next_id: vals[0] as u64,
        };
        for c in vals[1..].chunks_exact(3) {
            let id = c[0] as u64;
            r.bubbles.insert(id, Bubble { id, v0: c[1], v: c[2] });
        }
        Ok(r)
    }
}

/// Allocates the free-surface fields. Requires the LBM fields.
pub fn add_free_surface_fields(storage: &mut BlockStorage, params: &FreeSurfaceParams) -> FsResult<()> {
    storage.add_field(FILL, 1, params.fill_ghost_layers(), Layout::AoS, 8)?;
    storage.add_field(MASS, 1, 1, Layout::AoS, 8)?;
    storage.add_field(MASS_DELTA, 1, 1, Layout::AoS, 8)?;
    storage.add_field(BUBBLE_ID, 1, 1, Layout::AoS, 8)?;
    storage.add_field(CONVERSION, 1, 1, Layout::AoS, 8)?;
    storage.add_field(FS_MACRO, 4, 1, Layout::AoS, 8)?;
    storage.add_field(CURVATURE, 1, 0, Layout::AoS, 8)?;
    for b in storage.blocks() {
        b[BUBBLE_ID].write().fill(NO_BUBBLE);
    }
    Ok(())
}

fn tag_at(flags: &Field, c: [isize; 3]) -> f64 {
    flags.get(c[0], c[1], c[2], 0)
}

fn set_tag(flags: &mut Field, c: [isize; 3], t: f64) {
    for f in 0..4 {
        flags.set(c[0], c[1], c[2], f, if f == 0 { t } else { 0.0 });
    }
}

fn add(c: [isize; 3], e: [i32; 3]) -> [isize; 3] {
    [c[0] + e[0] as isize, c[1] + e[1] as isize, c[2] + e[2] as isize]
}

const FACES: [[i32; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

fn is_gas_or_interface(t: f64) -> bool {
    t == tag::GAS || t == tag::INTERFACE
}

/// Sets liquid/interface/gas flags on `Fluid`-capable cells from the fill
/// level, then closes the interface layer: liquid cells with a gas cell in
/// their stencil neighborhood become interface cells (fill 1).
///
/// Cells flagged as walls, pressure or velocity boundaries are left alone.
pub fn classify_cells<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    stencil: &Stencil,
    t: &T,
) -> FsResult<()> {
    for b in storage.local_blocks(plan.worker())? {
        let fill = b.field(FILL)?.read();
        let mut flags = b.field(FLAGS)?.write();
        for c in fill.interior_cells() {
            let cur = tag_at(&flags, c);
            if !(cur == tag::FLUID || cur == tag::GAS || cur == tag::INTERFACE) {
                continue;
            }
            let phi = fill.get(c[0], c[1], c[2], 0);
            if !(phi >= -FILL_TOLERANCE && phi <= 1.0 + FILL_TOLERANCE) {
                return Err(FsError::FillOutOfRange {
                    value: phi,
                    cell: b.to_global(c),
                });
            }
            let t = if phi >= 1.0 {
                tag::FLUID
            } else if phi <= 0.0 {
                tag::GAS
            } else {
                tag::INTERFACE
            };
            set_tag(&mut flags, c, t);
        }
    }
    exchange_ghost_layers(storage, plan, &[FLAGS], t)?;
    for b in storage.local_blocks(plan.worker())? {
        let mut flags = b.field(FLAGS)?.write();
        let cells: Vec<_> = flags
            .interior_cells()
            .filter(|&c| {
                tag_at(&flags, c) == tag::FLUID
                    && stencil.e.iter().any(|&e| tag_at(&flags, add(c, e)) == tag::GAS)
            })
            .collect();
        for c in cells {
            set_tag(&mut flags, c, tag::INTERFACE);
        }
    }
    exchange_ghost_layers(storage, plan, &[FLAGS], t)?;
    Ok(())
}

/// True when no liquid cell of the block has a gas cell among its face
/// neighbors (ghosts included).
pub fn closed_layer_holds(block: &Block) -> FsResult<bool> {
    let flags = block.field(FLAGS)?.read();
    Ok(flags.interior_cells().all(|c| {
        tag_at(&flags, c) != tag::FLUID || FACES.iter().all(|&e| tag_at(&flags, add(c, e)) != tag::GAS)
    }))
}

/// Parker-Youngs weighted fill gradient: 3x3x3 neighborhood, weights 4 for
/// face, 2 for edge and 1 for corner neighbors.
pub fn fill_gradient(fill: &Field, c: [isize; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let n = dx.abs() + dy.abs() + dz.abs();
                if n == 0 {
                    continue;
                }
                let w = match n {
                    1 => 4.0,
                    2 => 2.0,
                    _ => 1.0,
                };
                let phi = fill.get(c[0] + dx, c[1] + dy, c[2] + dz, 0);
                g[0] += w * dx as f64 * phi;
                g[1] += w * dy as f64 * phi;
                g[2] += w * dz as f64 * phi;
            }
        }
    }
    g
}

/// Unit normal pointing from liquid into gas, `None` if the gradient vanishes.
pub fn interface_normal(fill: &Field, c: [isize; 3]) -> Option<[f64; 3]> {
    let g = fill_gradient(fill, c);
    let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if len < 1e-12 {
        None
    } else {
        Some(g.map(|v| -v / len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterfaceGeometry {
    pub normal: [f64; 3],
    pub curvature: f64,
    /// Set when the fill gradient vanished at the cell.
    pub degenerate: bool,
}

/// Normal and curvature (divergence of the normal field, central
/// differences) of an interface cell. Needs two synchronized fill ghost
/// layers at block borders. With `sigma == 0` the curvature is skipped.
pub fn interface_geometry(fill: &Field, c: [isize; 3], sigma: f64) -> InterfaceGeometry {
    let Some(normal) = interface_normal(fill, c) else {
        return InterfaceGeometry {
            normal: [0.0, 0.0, 1.0],
            curvature: 0.0,
            degenerate: true,
        };
    };
    if sigma == 0.0 {
        return InterfaceGeometry {
            normal,
            curvature: 0.0,
            degenerate: false,
        };
    }
    let mut div = 0.0;
    for d in 0..3 {
        let mut e = [0i32; 3];
        e[d] = 1;
        let np = interface_normal(fill, add(c, e)).unwrap_or([0.0; 3]);
        e[d] = -1;
        let nm = interface_normal(fill, add(c, e)).unwrap_or([0.0; 3]);
        div += 0.5 * (np[d] - nm[d]);
    }
    InterfaceGeometry {
        normal,
        curvature: div,
        degenerate: false,
    }
}

/// Gas density seen by an interface cell: `rho_G = 3 p_G` with
/// `p_G = p_b / 3 - sigma * kappa`. The curvature is positive for liquid
/// bulging into gas, so a convex bubble (negative curvature) raises it.
pub fn gas_density(bubble_pressure: f64, sigma: f64, curvature: f64) -> f64 {
    3.0 * (bubble_pressure / 3.0 - sigma * curvature)
}

/// Rebuilds the populations streamed in from gas cells.
///
/// `f_post` are the post-collision populations of the cell, `gas_rho[a]` is
/// `Some(rho_G)` when the upstream cell `x - e_a` is gas. For those
/// directions `out[a] = feq_a(rho_G, u) + feq_abar(rho_G, u) - f_post[abar]`,
/// `u` being the cell velocity.
pub fn reconstruct_links(f_post: &[f64], gas_rho: &[Option<f64>], stencil: &Stencil, out: &mut [f64]) {
    let q = stencil.q;
    let mut rho = 0.0;
    let mut j = [0.0; 3];
    for a in 0..q {
        rho += f_post[a];
        for d in 0..3 {
            j[d] += f_post[a] * stencil.ef[a][d];
        }
    }
    let u = j.map(|v| v / rho);
    let mut feq = [0.0; 27];
    let mut last = None;
    for a in 0..q {
        if let Some(rg) = gas_rho[a] {
            if last != Some(rg) {
                equilibrium_into(rg, u, stencil, &mut feq);
                last = Some(rg);
            }
            let o = stencil.opposite[a];
            out[a] = feq[a] + feq[o] - f_post[o];
        }
    }
}

fn reconstruct_block(
    block: &Block,
    registry: &BubbleRegistry,
    params: &FreeSurfaceParams,
    stencil: &Stencil,
) -> FsResult<()> {
    let src = block.field(PDF)?.read();
    let mut dst = block.field(PDF_TMP)?.write();
    let flags = block.field(FLAGS)?.read();
    let ids = block.field(BUBBLE_ID)?.read();
    let curv = block.field(CURVATURE)?.read();
    let q = stencil.q;
    let mut f = vec![0.0; q];
    let mut out = vec![0.0; q];
    let mut gas = vec![None; q];
    for c in flags.interior_cells() {
        if tag_at(&flags, c) != tag::INTERFACE {
            continue;
        }
        let mut any = false;
        for a in 0..q {
            let up = add(c, stencil.e[a].map(|v| -v));
            gas[a] = None;
            if tag_at(&flags, up) == tag::GAS {
                let id = ids.get(up[0], up[1], up[2], 0);
                if id < 0.0 {
                    return Err(FsError::GasWithoutBubble {
                        cell: block.to_global(up),
                    });
                }
                let kappa = curv.get(c[0], c[1], c[2], 0);
                gas[a] = Some(gas_density(registry.pressure(id as u64)?, params.sigma, kappa));
                any = true;
            }
        }
        if !any {
            continue;
        }
        read_cell(&src, c, &mut f);
        reconstruct_links(&f, &gas, stencil, &mut out);
        for a in 0..q {
            if gas[a].is_some() {
                dst.set(c[0], c[1], c[2], a, out[a]);
            }
        }
    }
    Ok(())
}

/// Mass exchanged by interface cell `c` with its neighbors during streaming,
/// from post-collision populations.
pub fn mass_exchange(src: &Field, fill: &Field, flags: &Field, c: [isize; 3], stencil: &Stencil) -> f64 {
    let mut dm = 0.0;
    let phi = fill.get(c[0], c[1], c[2], 0);
    for a in 1..stencil.q {
        let y = add(c, stencil.e[a]);
        let t = tag_at(flags, y);
        if t != tag::FLUID && t != tag::INTERFACE {
            continue;
        }
        let o = stencil.opposite[a];
        let exchange = src.get(y[0], y[1], y[2], o) - src.get(c[0], c[1], c[2], a);
        dm += if t == tag::FLUID {
            exchange
        } else {
            exchange * (0.5 * (phi + fill.get(y[0], y[1], y[2], 0)))
        };
    }
    dm
}

fn advect_mass_block(block: &Block, stencil: &Stencil) -> FsResult<()> {
    let src = block.field(PDF)?.read();
    let fill = block.field(FILL)?.read();
    let flags = block.field(FLAGS)?.read();
    let mut mass = block.field(MASS)?.write();
    for c in flags.interior_cells() {
        if tag_at(&flags, c) == tag::INTERFACE {
            let dm = mass_exchange(&src, &fill, &flags, c, stencil);
            let m = mass.get(c[0], c[1], c[2], 0);
            mass.set(c[0], c[1], c[2], 0, m + dm);
        }
    }
    Ok(())
}

/// Recomputes density, velocity, mass and fill from the streamed populations.
fn update_fill_block(block: &Block, stencil: &Stencil) -> FsResult<()> {
    let dst = block.field(PDF_TMP)?.read();
    let flags = block.field(FLAGS)?.read();
    let mut mass = block.field(MASS)?.write();
    let mut fill = block.field(FILL)?.write();
    let mut mac = block.field(FS_MACRO)?.write();
    let mut f = vec![0.0; stencil.q];
    for c in flags.interior_cells() {
        let [x, y, z] = c;
        let t = tag_at(&flags, c);
        let (rho, u) = if t == tag::FLUID || t == tag::INTERFACE {
            read_cell(&dst, c, &mut f);
            let rho: f64 = f.iter().sum();
            let mut j = [0.0; 3];
            for (a, fa) in f.iter().enumerate() {
                for d in 0..3 {
                    j[d] += fa * stencil.ef[a][d];
                }
            }
            (rho, j.map(|v| v / rho))
        } else {
            (0.0, [0.0; 3])
        };
        mac.set(x, y, z, 0, rho);
        for d in 0..3 {
            mac.set(x, y, z, d + 1, u[d]);
        }
        if t == tag::FLUID {
            mass.set(x, y, z, 0, rho);
            fill.set(x, y, z, 0, 1.0);
        } else if t == tag::INTERFACE {
            fill.set(x, y, z, 0, mass.get(x, y, z, 0) / rho);
        } else if t == tag::GAS {
            mass.set(x, y, z, 0, 0.0);
            fill.set(x, y, z, 0, 0.0);
        }
    }
    Ok(())
}

const CONV_NONE: f64 = 0.0;
const CONV_TO_LIQUID: f64 = 1.0;
const CONV_TO_GAS: f64 = 2.0;
const CONV_FROM_GAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConversionStats {
    pub to_liquid: usize,
    pub to_gas: usize,
    pub gas_to_interface: usize,
    pub liquid_to_interface: usize,
    /// Mass that found no interface cell to go to.
    pub lost_mass: f64,
}

impl ConversionStats {
    fn add(&mut self, o: &ConversionStats) {
        self.to_liquid += o.to_liquid;
        self.to_gas += o.to_gas;
        self.gas_to_interface += o.gas_to_interface;
        self.liquid_to_interface += o.liquid_to_interface;
        self.lost_mass += o.lost_mass;
    }
}

/// Converts interface cells whose fill crossed `1 + eps` or `-eps`, repairs
/// the interface layer and redistributes excess mass.
///
/// Cells that fill up turn their gas neighbors into interface cells (mass 0,
/// populations from the neighbor average). A cell that would empty next to
/// a filling cell stays interface. Cells that empty turn their liquid
/// neighbors into interface cells (fill 1). The excess `m - rho` (or the
/// negative mass of an emptied cell) is split equally over face-adjacent
/// interface cells of the repaired state.
pub fn convert_cells<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    params: &FreeSurfaceParams,
    stencil: &Stencil,
    t: &T,
) -> FsResult<ConversionStats> {
    let me = plan.worker();
    let mut stats = ConversionStats::default();
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let fill = b.field(FILL)?.read();
        let mut conv = b.field(CONVERSION)?.write();
        conv.fill(CONV_NONE);
        for c in flags.interior_cells() {
            if tag_at(&flags, c) != tag::INTERFACE {
                continue;
            }
            let phi = fill.get(c[0], c[1], c[2], 0);
            if phi >= 1.0 + params.epsilon {
                conv.set(c[0], c[1], c[2], 0, CONV_TO_LIQUID);
            } else if phi <= -params.epsilon {
                conv.set(c[0], c[1], c[2], 0, CONV_TO_GAS);
            }
        }
    }
    exchange_ghost_layers(storage, plan, &[CONVERSION, FS_MACRO], t)?;

    let mut excess: Vec<Vec<([isize; 3], f64)>> = Vec::new();
    for b in storage.local_blocks(me)? {
        let mut flags = b.field(FLAGS)?.write();
        let mut conv = b.field(CONVERSION)?.write();
        let mut mass = b.field(MASS)?.write();
        let mut fill = b.field(FILL)?.write();
        let mut ids = b.field(BUBBLE_ID)?.write();
        let mut pdf = b.field(PDF_TMP)?.write();
        let mut mac = b.field(FS_MACRO)?.write();
        let near_filling = |conv: &Field, c: [isize; 3]| {
            stencil.e.iter().any(|&e| conv.get_at(add(c, e)) == CONV_TO_LIQUID)
        };
        let mut decisions = Vec::new();
        for c in flags.interior_cells() {
            let t = tag_at(&flags, c);
            let cv = conv.get_at(c);
            if cv == CONV_TO_LIQUID {
                decisions.push((c, CONV_TO_LIQUID));
            } else if cv == CONV_TO_GAS {
                decisions.push((c, if near_filling(&conv, c) { CONV_NONE } else { CONV_TO_GAS }));
            } else if t == tag::GAS && near_filling(&conv, c) {
                decisions.push((c, CONV_FROM_GAS));
            }
        }
        let mut block_excess = Vec::new();
        let mut feq = vec![0.0; stencil.q];
        for &(c, d) in &decisions {
            let [x, y, z] = c;
            let rho = mac.get(x, y, z, 0);
            match d {
                d if d == CONV_TO_LIQUID => {
                    block_excess.push((c, mass.get(x, y, z, 0) - rho));
                    set_tag(&mut flags, c, tag::FLUID);
                    mass.set(x, y, z, 0, rho);
                    fill.set(x, y, z, 0, 1.0);
                    ids.set(x, y, z, 0, NO_BUBBLE);
                    stats.to_liquid += 1;
                }
                d if d == CONV_TO_GAS => {
                    block_excess.push((c, mass.get(x, y, z, 0)));
                    set_tag(&mut flags, c, tag::GAS);
                    mass.set(x, y, z, 0, 0.0);
                    fill.set(x, y, z, 0, 0.0);
                    stats.to_gas += 1;
                }
                d if d == CONV_FROM_GAS => {
                    // average over neighbors that were liquid or interface before conversion
                    let mut n = 0.0;
                    let mut rho_avg = 0.0;
                    let mut u_avg = [0.0; 3];
                    for &e in &stencil.e {
                        let nb = add(c, e);
                        let r = mac.get(nb[0], nb[1], nb[2], 0);
                        if r > 0.0 {
                            n += 1.0;
                            rho_avg += r;
                            for k in 0..3 {
                                u_avg[k] += mac.get(nb[0], nb[1], nb[2], k + 1);
                            }
                        }
                    }
                    rho_avg /= n;
                    let u_avg = u_avg.map(|v| v / n);
                    equilibrium_into(rho_avg, u_avg, stencil, &mut feq);
                    for (a, &v) in feq.iter().enumerate() {
                        pdf.set(x, y, z, a, v);
                    }
                    mac.set(x, y, z, 0, rho_avg);
                    for k in 0..3 {
                        mac.set(x, y, z, k + 1, u_avg[k]);
                    }
                    set_tag(&mut flags, c, tag::INTERFACE);
                    mass.set(x, y, z, 0, 0.0);
                    fill.set(x, y, z, 0, 0.0);
                    stats.gas_to_interface += 1;
                }
                _ => {}
            }
        }
        for &(c, d) in &decisions {
            conv.set(c[0], c[1], c[2], 0, d);
        }
        excess.push(block_excess);
    }
    exchange_ghost_layers(storage, plan, &[FLAGS, CONVERSION, BUBBLE_ID], t)?;

    for b in storage.local_blocks(me)? {
        let mut flags = b.field(FLAGS)?.write();
        let conv = b.field(CONVERSION)?.read();
        let mut ids = b.field(BUBBLE_ID)?.write();
        let mut fill = b.field(FILL)?.write();
        let cells: Vec<_> = flags
            .interior_cells()
            .filter(|&c| {
                tag_at(&flags, c) == tag::FLUID && stencil.e.iter().any(|&e| conv.get_at(add(c, e)) == CONV_TO_GAS)
            })
            .collect();
        for c in cells {
            let id = stencil
                .e
                .iter()
                .map(|&e| ids.get_at(add(c, e)))
                .filter(|&v| v >= 0.0)
                .fold(f64::INFINITY, f64::min);
            set_tag(&mut flags, c, tag::INTERFACE);
            ids.set(c[0], c[1], c[2], 0, if id.is_finite() { id } else { NO_BUBBLE });
            fill.set(c[0], c[1], c[2], 0, 1.0);
            stats.liquid_to_interface += 1;
        }
    }
    exchange_ghost_layers(storage, plan, &[FLAGS, BUBBLE_ID], t)?;

    for (b, block_excess) in storage.local_blocks(me)?.zip(excess) {
        let flags = b.field(FLAGS)?.read();
        let mut delta = b.field(MASS_DELTA)?.write();
        for (c, m) in block_excess {
            let targets: Vec<[isize; 3]> = FACES
                .iter()
                .map(|&e| add(c, e))
                .filter(|&n| tag_at(&flags, n) == tag::INTERFACE)
                .collect();
            let targets = if targets.is_empty() {
                nearest_interface(&flags, c).into_iter().collect()
            } else {
                targets
            };
            if targets.is_empty() {
                warn!("no interface cell to take mass {m:e} from cell {:?}", b.to_global(c));
                stats.lost_mass += m;
                continue;
            }
            let share = m / targets.len() as f64;
            for n in targets {
                let v = delta.get_at(n);
                delta.set(n[0], n[1], n[2], 0, v + share);
            }
        }
    }
    accumulate_ghost_layers(storage, plan, &[MASS_DELTA], t)?;
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let mac = b.field(FS_MACRO)?.read();
        let mut delta = b.field(MASS_DELTA)?.write();
        let mut mass = b.field(MASS)?.write();
        let mut fill = b.field(FILL)?.write();
        for c in flags.interior_cells() {
            let d = delta.get_at(c);
            if d == 0.0 {
                continue;
            }
            if tag_at(&flags, c) == tag::INTERFACE {
                let m = mass.get_at(c) + d;
                mass.set(c[0], c[1], c[2], 0, m);
                fill.set(c[0], c[1], c[2], 0, m / mac.get(c[0], c[1], c[2], 0));
            } else {
                warn!("mass {d:e} sent to non-interface cell {:?}", b.to_global(c));
                stats.lost_mass += d;
            }
        }
        delta.fill(0.0);
    }
    Ok(stats)
}

fn nearest_interface(flags: &Field, c: [isize; 3]) -> Option<[isize; 3]> {
    flags
        .interior_cells()
        .filter(|&n| tag_at(flags, n) == tag::INTERFACE)
        .min_by_key(|n| {
            let d = [0, 1, 2].map(|k| n[k] - c[k]);
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        })
}

trait GetAt {
    fn get_at(&self, c: [isize; 3]) -> f64;
}

impl GetAt for Field {
    fn get_at(&self, c: [isize; 3]) -> f64 {
        self.get(c[0], c[1], c[2], 0)
    }
}

fn linear_index(storage: &BlockStorage, g: [i64; 3]) -> u64 {
    let n = storage.cell_count();
    (g[0] as u64) + n[0] as u64 * (g[1] as u64 + n[1] as u64 * g[2] as u64)
}

/// Volume contribution of a cell: 1 for gas, `1 - phi` for interface.
fn cell_volume(t: f64, phi: f64) -> f64 {
    if t == tag::GAS {
        1.0
    } else {
        1.0 - phi
    }
}

/// Per-bubble exact volume sums over the worker's cells.
fn local_volumes(storage: &BlockStorage, worker: usize) -> FsResult<BTreeMap<u64, ExactSum>> {
    let mut out: BTreeMap<u64, ExactSum> = BTreeMap::new();
    for b in storage.local_blocks(worker)? {
        let flags = b.field(FLAGS)?.read();
        let fill = b.field(FILL)?.read();
        let ids = b.field(BUBBLE_ID)?.read();
        for c in flags.interior_cells() {
            let t = tag_at(&flags, c);
            if !is_gas_or_interface(t) {
                continue;
            }
            let id = ids.get_at(c);
            if id < 0.0 {
                continue;
            }
            out.entry(id as u64).or_default().add(cell_volume(t, fill.get_at(c)));
        }
    }
    Ok(out)
}

fn encode_volumes(pairs: &[(u64, u64)], vols: &BTreeMap<u64, ExactSum>) -> Vec<u8> {
    let mut v = vec![pairs.len() as f64];
    for &(a, b) in pairs {
        v.extend([a as f64, b as f64]);
    }
    for (id, s) in vols {
        v.push(*id as f64);
        v.push(s.partials().len() as f64);
        v.extend_from_slice(s.partials());
    }
    f64s_to_bytes(&v)
}

type VolumeMessage = (Vec<(u64, u64)>, BTreeMap<u64, ExactSum>);

fn decode_volumes(bytes: &[u8]) -> FsResult<VolumeMessage> {
    let v = bytes_to_f64s(bytes)?;
    let np = v[0] as usize;
    let pairs = (0..np).map(|i| (v[1 + 2 * i] as u64, v[2 + 2 * i] as u64)).collect();
    let mut vols = BTreeMap::new();
    let mut i = 1 + 2 * np;
    while i < v.len() {
        let id = v[i] as u64;
        let n = v[i + 1] as usize;
        vols.insert(id, ExactSum::from_partials(&v[i + 2..i + 2 + n]));
        i += 2 + n;
    }
    Ok((pairs, vols))
}

fn find(parent: &mut BTreeMap<u64, u64>, x: u64) -> u64 {
    let mut r = x;
    while let Some(&p) = parent.get(&r) {
        if p == r {
            break;
        }
        r = p;
    }
    let mut c = x;
    while let Some(&p) = parent.get(&c) {
        if p == r {
            break;
        }
        parent.insert(c, r);
        c = p;
    }
    r
}

/// Once-per-step bubble bookkeeping: label merges where different bubbles
/// touch, a global relabel every `relabel_interval` steps, then fresh volumes.
///
/// Volumes are recomputed each step from the cells, so
/// `sum V = sum_gas 1 + sum_interface (1 - phi)` holds at every step, not
/// only at relabel steps.
pub fn update_bubbles<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    params: &FreeSurfaceParams,
    registry: &mut BubbleRegistry,
    step: u64,
    t: &T,
) -> FsResult<()> {
    if step % params.relabel_interval == 0 {
        return relabel(storage, plan, registry, t);
    }
    let me = plan.worker();
    let mut pairs = BTreeSet::new();
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let ids = b.field(BUBBLE_ID)?.read();
        for c in flags.interior_cells() {
            if !is_gas_or_interface(tag_at(&flags, c)) {
                continue;
            }
            let a = ids.get_at(c);
            for e in [[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]] {
                let n = add(c, e);
                if is_gas_or_interface(tag_at(&flags, n)) {
                    let bid = ids.get_at(n);
                    if a >= 0.0 && bid >= 0.0 && a != bid {
                        pairs.insert(((a as u64).min(bid as u64), (a as u64).max(bid as u64)));
                    }
                }
            }
        }
    }
    let pairs: Vec<_> = pairs.into_iter().collect();
    let vols = local_volumes(storage, me)?;
    let gathered = gather_bytes(t, &encode_volumes(&pairs, &vols))?;
    let mut alias: Vec<(u64, u64)> = Vec::new();
    let payload = if let Some(parts) = gathered {
        let mut reg = registry.clone();
        let mut all_pairs = BTreeSet::new();
        let mut totals: BTreeMap<u64, ExactSum> = BTreeMap::new();
        for p in parts {
            let (pp, vv) = decode_volumes(&p)?;
            all_pairs.extend(pp);
            for (id, s) in vv {
                totals.entry(id).or_default().merge(&s);
            }
        }
        let mut parent: BTreeMap<u64, u64> = BTreeMap::new();
        for &(a, b) in &all_pairs {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent.insert(ra.max(rb), ra.min(rb));
                parent.entry(ra.min(rb)).or_insert(ra.min(rb));
            }
        }
        let ids: Vec<u64> = parent.keys().copied().collect();
        for id in ids {
            let root = find(&mut parent, id);
            if root != id {
                alias.push((id, root));
                reg.merge(root, id)?;
                if let Some(s) = totals.remove(&id) {
                    totals.entry(root).or_default().merge(&s);
                }
            }
        }
        let known: Vec<u64> = reg.bubbles.keys().copied().collect();
        for id in known {
            let v = totals.get(&id).map_or(0.0, ExactSum::value);
            reg.bubbles.get_mut(&id).unwrap().v = v;
        }
        let mut msg = f64s_to_bytes(&[alias.len() as f64]);
        for &(a, b) in &alias {
            msg.extend(f64s_to_bytes(&[a as f64, b as f64]));
        }
        msg.extend(reg.encode());
        Some(msg)
    } else {
        None
    };
    let msg = bytes_to_f64s(&broadcast_bytes(t, payload.as_deref())?)?;
    let na = msg[0] as usize;
    let alias: HashMap<u64, u64> = (0..na).map(|i| (msg[1 + 2 * i] as u64, msg[2 + 2 * i] as u64)).collect();
    *registry = BubbleRegistry::decode(&f64s_to_bytes(&msg[1 + 2 * na..]))?;
    if !alias.is_empty() {
        for b in storage.local_blocks(me)? {
            let mut ids = b.field(BUBBLE_ID)?.write();
            for c in ids.all_cells().collect::<Vec<_>>() {
                let v = ids.get_at(c);
                if v >= 0.0 {
                    if let Some(&n) = alias.get(&(v as u64)) {
                        ids.set(c[0], c[1], c[2], 0, n as f64);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Global 6-connected relabeling of gas and interface cells, gathered on root.
///
/// Each connected component keeps the smallest old id present in it that is
/// not already taken by an earlier component (components ordered by their
/// first cell); other components get fresh ids. The initial volume of an old
/// bubble is split over its components in proportion to their share of its
/// current volume. Cells without a bubble start components at reference
/// pressure (V0 = V).
pub fn relabel<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    registry: &mut BubbleRegistry,
    t: &T,
) -> FsResult<()> {
    let me = plan.worker();
    let mut mine = Vec::new();
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let fill = b.field(FILL)?.read();
        let ids = b.field(BUBBLE_ID)?.read();
        for c in flags.interior_cells() {
            let tg = tag_at(&flags, c);
            if is_gas_or_interface(tg) {
                mine.extend([
                    linear_index(storage, b.to_global(c)) as f64,
                    ids.get_at(c),
                    cell_volume(tg, fill.get_at(c)),
                ]);
            }
        }
    }
    let gathered = gather_bytes(t, &f64s_to_bytes(&mine))?;
    let (parts, reg_bytes) = if let Some(parts) = gathered {
        let per_worker: Vec<Vec<f64>> = parts.iter().map(|p| bytes_to_f64s(p)).collect::<Result<_, _>>()?;
        let (new_ids, reg) = relabel_on_root(storage, registry, &per_worker)?;
        (Some(new_ids.into_iter().map(|v| f64s_to_bytes(&v)).collect()), Some(reg.encode()))
    } else {
        (None, None)
    };
    let my_ids = bytes_to_f64s(&scatter_bytes(t, parts)?)?;
    *registry = BubbleRegistry::decode(&broadcast_bytes(t, reg_bytes.as_deref())?)?;
    let mut k = 0;
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let mut ids = b.field(BUBBLE_ID)?.write();
        ids.fill(NO_BUBBLE);
        for c in flags.interior_cells() {
            if is_gas_or_interface(tag_at(&flags, c)) {
                ids.set(c[0], c[1], c[2], 0, my_ids[k]);
                k += 1;
            }
        }
    }
    if k != my_ids.len() {
        return Err(FsError::Labels(format!("{} labels for {k} cells", my_ids.len())));
    }
    exchange_ghost_layers(storage, plan, &[BUBBLE_ID], t)?;
    Ok(())
}

fn relabel_on_root(
    storage: &BlockStorage,
    registry: &BubbleRegistry,
    per_worker: &[Vec<f64>],
) -> FsResult<(Vec<Vec<f64>>, BubbleRegistry)> {
    // (linear index, old id, volume, worker, position)
    let mut cells: Vec<(u64, f64, f64, usize, usize)> = Vec::new();
    for (w, v) in per_worker.iter().enumerate() {
        for (i, c) in v.chunks_exact(3).enumerate() {
            cells.push((c[0] as u64, c[1], c[2], w, i));
        }
    }
    cells.sort_by_key(|c| c.0);
    let pos: HashMap<u64, usize> = cells.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
    let n = storage.cell_count();
    let mut parent: Vec<usize> = (0..cells.len()).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..cells.len() {
        let l = cells[i].0;
        let g = [
            (l % n[0] as u64) as i64,
            ((l / n[0] as u64) % n[1] as u64) as i64,
            (l / (n[0] as u64 * n[1] as u64)) as i64,
        ];
        for d in 0..3 {
            let mut h = g;
            h[d] += 1;
            let Some(h) = storage.wrap_cell(h) else { continue };
            if let Some(&j) = pos.get(&linear_index(storage, h)) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // components in order of first cell
    let mut comp_of = vec![0usize; cells.len()];
    let mut comp_index: HashMap<usize, usize> = HashMap::new();
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..cells.len() {
        let r = root(&mut parent, i);
        let k = *comp_index.entry(r).or_insert_with(|| {
            comps.push(Vec::new());
            comps.len() - 1
        });
        comps[k].push(i);
        comp_of[i] = k;
    }
    // volume of each old bubble inside each component
    let mut share: BTreeMap<u64, BTreeMap<usize, (ExactSum, usize)>> = BTreeMap::new();
    let mut comp_vol: Vec<ExactSum> = vec![ExactSum::default(); comps.len()];
    let mut orphan_vol: Vec<ExactSum> = vec![ExactSum::default(); comps.len()];
    for (i, c) in cells.iter().enumerate() {
        let k = comp_of[i];
        comp_vol[k].add(c.2);
        if c.1 >= 0.0 && registry.get(c.1 as u64).is_some() {
            let e = share.entry(c.1 as u64).or_default().entry(k).or_default();
            e.0.add(c.2);
            e.1 += 1;
        } else {
            orphan_vol[k].add(c.2);
        }
    }
    let mut comp_v0: Vec<ExactSum> = orphan_vol.clone();
    for (id, parts) in &share {
        let v0 = registry.get(*id).unwrap().v0;
        let total: f64 = parts.values().map(|p| p.0.value()).sum();
        let count: usize = parts.values().map(|p| p.1).sum();
        for (&k, p) in parts {
            let frac = if parts.len() == 1 {
                1.0
            } else if total > 0.0 {
                p.0.value() / total
            } else {
                p.1 as f64 / count as f64
            };
            comp_v0[k].add(v0 * frac);
        }
    }
    let mut reg = BubbleRegistry {
        bubbles: BTreeMap::new(),
        next_id: registry.next_id,
    };
    let mut taken = BTreeSet::new();
    let mut comp_id = vec![0u64; comps.len()];
    for k in 0..comps.len() {
        let candidate = share
            .iter()
            .filter(|(id, parts)| parts.contains_key(&k) && !taken.contains(*id))
            .map(|(id, _)| *id)
            .next();
        let v = comp_vol[k].value();
        let v0 = comp_v0[k].value();
        let id = match candidate {
            Some(id) => {
                taken.insert(id);
                reg.bubbles.insert(id, Bubble { id, v0, v });
                id
            }
            None => reg.insert(v0, v),
        };
        comp_id[k] = id;
    }
    let mut out: Vec<Vec<f64>> = per_worker.iter().map(|v| vec![0.0; v.len() / 3]).collect();
    for (i, c) in cells.iter().enumerate() {
        out[c.3][c.4] = comp_id[comp_of[i]] as f64;
    }
    Ok((out, reg))
}

/// Sets mass from fill and populations, classifies cells and labels the
/// initial bubbles (V0 = V). Fill levels and populations must already be set.
pub fn init_free_surface<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    stencil: &Stencil,
    registry: &mut BubbleRegistry,
    t: &T,
) -> FsResult<()> {
    exchange_ghost_layers(storage, plan, &[FLAGS], t)?;
    classify_cells(storage, plan, stencil, t)?;
    let mut f = vec![0.0; stencil.q];
    for b in storage.local_blocks(plan.worker())? {
        let flags = b.field(FLAGS)?.read();
        let pdf = b.field(PDF)?.read();
        let mut fill = b.field(FILL)?.write();
        let mut mass = b.field(MASS)?.write();
        for c in flags.interior_cells() {
            let tg = tag_at(&flags, c);
            let phi = fill.get_at(c).clamp(0.0, 1.0);
            let (phi, m) = if tg == tag::FLUID || tg == tag::INTERFACE {
                read_cell(&pdf, c, &mut f);
                let rho: f64 = f.iter().sum();
                let phi = if tg == tag::FLUID { 1.0 } else { phi };
                (phi, phi * rho)
            } else {
                (if tg == tag::GAS { 0.0 } else { phi }, 0.0)
            };
            fill.set(c[0], c[1], c[2], 0, phi);
            mass.set(c[0], c[1], c[2], 0, m);
        }
    }
    *registry = BubbleRegistry::default();
    relabel(storage, plan, registry, t)?;
    exchange_ghost_layers(storage, plan, &[FILL], t)?;
    Ok(())
}

/// Curvature of every interface cell of the block (zero elsewhere).
fn curvature_block(block: &Block, sigma: f64) -> FsResult<()> {
    let fill = block.field(FILL)?.read();
    let flags = block.field(FLAGS)?.read();
    let mut curv = block.field(CURVATURE)?.write();
    for c in flags.interior_cells() {
        let k = if tag_at(&flags, c) == tag::INTERFACE {
            interface_geometry(&fill, c, sigma).curvature
        } else {
            0.0
        };
        curv.set(c[0], c[1], c[2], 0, k);
    }
    Ok(())
}

/// One free-surface step.
///
/// Order: exchange fill/flags/ids, curvature, collide, exchange pdf, stream
/// with boundaries, rebuild gas-side populations, advect mass, refresh fill,
/// convert cells, bubble bookkeeping, swap.
#[allow(clippy::too_many_arguments)]
pub fn fslbm_timestep<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    trt: &TrtParams,
    params: &FreeSurfaceParams,
    stencil: &Stencil,
    registry: &mut BubbleRegistry,
    step: u64,
    t: &T,
) -> FsResult<ConversionStats> {
    let me = plan.worker();
    exchange_ghost_layers(storage, plan, &[FILL, FLAGS, BUBBLE_ID], t)?;
    if params.sigma > 0.0 {
        for b in storage.local_blocks(me)? {
            curvature_block(b, params.sigma)?;
        }
    }
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let mut tmp = b.field(PDF_TMP)?.write();
        collide_block(&mut b.field(PDF)?.write(), &mut tmp, &flags, trt, stencil);
    }
    exchange_ghost_layers(storage, plan, &[PDF], t)?;
    for b in storage.local_blocks(me)? {
        let flags = b.field(FLAGS)?.read();
        let src = b.field(PDF)?.read();
        stream_and_bounce(&src, &mut b.field(PDF_TMP)?.write(), &flags, stencil)?;
    }
    for b in storage.local_blocks(me)? {
        reconstruct_block(b, registry, params, stencil)?;
        advect_mass_block(b, stencil)?;
        update_fill_block(b, stencil)?;
    }
    let stats = convert_cells(storage, plan, params, stencil, t)?;
    update_bubbles(storage, plan, params, registry, step, t)?;
    for b in storage.local_blocks(me)? {
        swap_pdfs(b)?;
    }
    Ok(stats)
}

/// Sums conversion counters over all workers onto root.
pub fn total_stats<T: Transport + ?Sized>(stats: &ConversionStats, t: &T) -> FsResult<Option<ConversionStats>> {
    let v = [
        stats.to_liquid as f64,
        stats.to_gas as f64,
        stats.gas_to_interface as f64,
        stats.liquid_to_interface as f64,
        stats.lost_mass,
    ];
    Ok(gather_bytes(t, &f64s_to_bytes(&v))?.map(|parts| {
        let mut total = ConversionStats::default();
        for p in parts {
            let v = bytes_to_f64s(&p).unwrap();
            total.add(&ConversionStats {
                to_liquid: v[0] as usize,
                to_gas: v[1] as usize,
                gas_to_interface: v[2] as usize,
                liquid_to_interface: v[3] as usize,
                lost_mass: v[4],
            });
        }
        total
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::LocalTransport;
    use crate::lbm::{add_lbm_fields, make_stencil, set_cell_equilibrium, write_flag, Flag, StencilKind};

    #[test]
    fn exact_sum_is_order_independent() {
        let vals = [1e16, 1.0, -1e16, 3.5, 1e-20, 0.1, 0.2];
        let mut a = ExactSum::default();
        vals.iter().for_each(|&v| a.add(v));
        let mut b = ExactSum::default();
        vals.iter().rev().for_each(|&v| b.add(v));
        assert_eq!(a.value(), b.value());
        assert_eq!(a.value(), 4.8);
        let mut c = ExactSum::default();
        for _ in 0..10 {
            c.add(0.1);
        }
        assert_eq!(c.value(), 1.0);
    }

    #[test]
    fn params_validation() {
        assert!(FreeSurfaceParams::new(0.0, 0.5, 100).is_err());
        assert!(FreeSurfaceParams::new(-1.0, 0.01, 100).is_err());
        assert!(FreeSurfaceParams::new(0.0, 0.01, 0).is_err());
        assert_eq!(FreeSurfaceParams::new(0.1, 0.01, 10).unwrap().fill_ghost_layers(), 2);
    }

    #[test]
    fn registry_merge_and_pressure() {
        let mut r = BubbleRegistry::default();
        let a = r.insert(10.0, 10.0);
        let b = r.insert(5.0, 4.0);
        assert_eq!(r.pressure(a).unwrap(), 1.0);
        r.get_mut(a).unwrap().v = 9.0;
        assert_eq!(r.pressure(a).unwrap(), 10.0 / 9.0);
        assert_eq!(r.merge(b, a).unwrap(), a);
        let m = r.get(a).unwrap();
        assert_eq!((m.v0, m.v), (15.0, 13.0));
        assert!(r.get(b).is_none());
        assert_eq!(BubbleRegistry::decode(&r.encode()).unwrap(), r);
    }

    fn fill_field(n: usize, g: usize, phi: impl Fn([isize; 3]) -> f64) -> Field {
        let mut f = Field::new(FILL, [n, n, n, 1], g, Layout::AoS, 8).unwrap();
        for c in f.all_cells().collect::<Vec<_>>() {
            f.set(c[0], c[1], c[2], 0, phi(c));
        }
        f
    }

    #[test]
    fn planar_interface_geometry() {
        let f = fill_field(6, 2, |c| (3.5 - c[2] as f64).clamp(0.0, 1.0));
        let g = interface_geometry(&f, [2, 2, 3], 0.1);
        assert!(!g.degenerate);
        assert_eq!(g.normal, [0.0, 0.0, 1.0]);
        assert_eq!(g.curvature, 0.0);
        let flat = fill_field(4, 1, |_| 1.0);
        let g = interface_geometry(&flat, [1, 1, 1], 0.1);
        assert!(g.degenerate);
        assert_eq!((g.normal, g.curvature), ([0.0, 0.0, 1.0], 0.0));
    }

    #[test]
    fn reconstruction_rest_state_is_fixed_point() {
        let s = make_stencil(StencilKind::D3Q19);
        let f = s.w.clone();
        let mut out = vec![-1.0; 19];
        let gas: Vec<Option<f64>> = (0..19).map(|a| if s.e[a][2] < 0 { Some(1.0) } else { None }).collect();
        reconstruct_links(&f, &gas, &s, &mut out);
        for a in 0..19 {
            if gas[a].is_some() {
                assert!((out[a] - s.w[a]).abs() < 1e-17);
            } else {
                assert_eq!(out[a], -1.0);
            }
        }
        assert_eq!(gas_density(1.0 / 0.9, 0.0, 0.3), 1.0 / 0.9);
        assert!(gas_density(1.0, 0.01, -0.25) > 1.0);
    }

    fn pool(n: usize, level: f64) -> (BlockStorage, Stencil) {
        let s = make_stencil(StencilKind::D3Q19);
        let mut st = BlockStorage::uniform([n; 3], [n; 3], [false; 3], 1).unwrap();
        add_lbm_fields(&mut st, &s, Layout::AoS, 8).unwrap();
        add_free_surface_fields(&mut st, &FreeSurfaceParams::default()).unwrap();
        let b = &st.blocks()[0];
        let mut fill = b[FILL].write();
        let mut pdf = b[PDF].write();
        let mut flags = b[FLAGS].write();
        for c in fill.interior_cells().collect::<Vec<_>>() {
            let nn = n as isize - 1;
            if c.iter().any(|&v| v == 0 || v == nn) {
                write_flag(&mut flags, c[0], c[1], c[2], Flag::NoSlip);
                continue;
            }
            fill.set(c[0], c[1], c[2], 0, (level - c[2] as f64).clamp(0.0, 1.0));
            set_cell_equilibrium(&mut pdf, c, 1.0, [0.0; 3], &s);
        }
        drop((fill, pdf, flags));
        (st, s)
    }

    #[test]
    fn half_space_gets_one_interface_layer() {
        let (st, s) = pool(8, 4.0);
        let t = LocalTransport::solo();
        let plan = ExchangePlan::new(&st, 0).unwrap();
        let mut reg = BubbleRegistry::default();
        init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
        let flags = st.blocks()[0][FLAGS].read();
        for z in 1..7isize {
            let tg = flags.get(3, 3, z, 0);
            let want = match z {
                1..=2 => tag::FLUID,
                3 => tag::INTERFACE,
                _ => tag::GAS,
            };
            assert_eq!(tg, want, "z={z}");
        }
        assert_eq!(reg.len(), 1);
        let bub = reg.bubbles().next().unwrap();
        assert_eq!(bub.v, bub.v0);
        assert!(closed_layer_holds(&st.blocks()[0]).unwrap());
    }

    #[test]
    fn fill_out_of_range_is_rejected() {
        let (st, s) = pool(6, 3.0);
        st.blocks()[0][FILL].write().set(2, 2, 2, 0, 1.5);
        let t = LocalTransport::solo();
        let plan = ExchangePlan::new(&st, 0).unwrap();
        let mut reg = BubbleRegistry::default();
        assert!(matches!(
            init_free_surface(&st, &plan, &s, &mut reg, &t),
            Err(FsError::FillOutOfRange { .. })
        ));
    }

    #[test]
    fn resting_pool_stays_at_rest() {
        let (st, s) = pool(10, 4.5);
        let t = LocalTransport::solo();
        let plan = ExchangePlan::new(&st, 0).unwrap();
        let mut reg = BubbleRegistry::default();
        init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
        let trt = TrtParams::from_omega(1.0, crate::lbm::DEFAULT_MAGIC).unwrap();
        let params = FreeSurfaceParams::default();
        for step in 1..=20 {
            let stats = fslbm_timestep(&st, &plan, &trt, &params, &s, &mut reg, step, &t).unwrap();
            assert_eq!(stats, ConversionStats::default());
        }
        let b = &st.blocks()[0];
        crate::lbm::update_macroscopic(b, &s).unwrap();
        let v = b[crate::lbm::VELOCITY].read();
        let umax = v.interior_cells().flat_map(|c| (0..3).map(move |d| (c, d))).map(|(c, d)| v.get(c[0], c[1], c[2], d).abs()).fold(0.0, f64::max);
        assert!(umax <= 1e-15, "{umax}");
        assert!((reg.bubbles().next().unwrap().pressure() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mass_exchange_is_antisymmetric() {
        let s = make_stencil(StencilKind::D3Q19);
        let mut src = Field::new(PDF, [3, 1, 1, 19], 1, Layout::AoS, 8).unwrap();
        let mut flags = Field::new(FLAGS, [3, 1, 1, 4], 1, Layout::AoS, 8).unwrap();
        let mut fill = Field::new(FILL, [3, 1, 1, 1], 1, Layout::AoS, 8).unwrap();
        for c in src.all_cells().collect::<Vec<_>>() {
            set_tag(&mut flags, c, tag::GAS);
            for a in 0..19 {
                src.set(c[0], c[1], c[2], a, 0.01 * (a as f64 + 1.0) + 0.1 * c[0] as f64);
            }
        }
        set_tag(&mut flags, [0, 0, 0], tag::INTERFACE);
        set_tag(&mut flags, [1, 0, 0], tag::INTERFACE);
        fill.set(0, 0, 0, 0, 0.3);
        fill.set(1, 0, 0, 0, 0.6);
        let a = mass_exchange(&src, &fill, &flags, [0, 0, 0], &s);
        let b = mass_exchange(&src, &fill, &flags, [1, 0, 0], &s);
        assert_eq!(a, -b);
        let px = s.e.iter().position(|e| *e == [1, 0, 0]).unwrap();
        let mx = s.opposite[px];
        assert_eq!(a, (src.get(1, 0, 0, mx) - src.get(0, 0, 0, px)) * (0.5 * (0.3 + 0.6)));
    }
}
