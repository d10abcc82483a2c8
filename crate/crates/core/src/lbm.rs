//! Lattice Boltzmann kernels: stencils, equilibrium, TRT collision, pull
//! streaming and the wall/pressure/velocity boundary rules.
//!
//! Per-block fields used by the time step:
//! - `pdf`, `pdf_tmp`: Q components, one ghost layer
//! - `flags`: 4 components `[tag, p0, p1, p2]`, one ghost layer
//! - `density` (1) and `velocity` (3): derived output, no ghosts

use thiserror::Error;

use crate::blockgrid::{Block, BlockStorage, GridError};
use crate::comms::{exchange_ghost_layers, CommError, ExchangePlan, Transport};
use crate::field::{Field, Layout};

pub const PDF: &str = "pdf";
pub const PDF_TMP: &str = "pdf_tmp";
pub const FLAGS: &str = "flags";
pub const DENSITY: &str = "density";
pub const VELOCITY: &str = "velocity";

#[derive(Debug, Error)]
pub enum LbmError {
    #[error("unknown stencil '{0}'")]
    UnknownStencil(String),
    #[error("non-positive density {0}")]
    InvalidDensity(f64),
    #[error("relaxation rate {0} outside (0, 2)")]
    BadOmega(f64),
    #[error("lattice viscosity must be positive, got {0}")]
    BadViscosity(f64),
    #[error("magic parameter must be positive, got {0}")]
    BadMagic(f64),
    #[error("unknown flag value {0}")]
    UnknownFlag(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Comm(#[from] CommError),
}

pub type LbmResult<T> = Result<T, LbmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilKind {
    D3Q19,
    D2Q9,
}

impl std::str::FromStr for StencilKind {
    type Err = LbmError;

    fn from_str(s: &str) -> Result<Self, LbmError> {
        match s.to_ascii_uppercase().as_str() {
            "D3Q19" => Ok(StencilKind::D3Q19),
            "D2Q9" => Ok(StencilKind::D2Q9),
            _ => Err(LbmError::UnknownStencil(s.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stencil {
    pub kind: StencilKind,
    pub q: usize,
    pub e: Vec<[i32; 3]>,
    /// `e` as floating point.
    pub ef: Vec<[f64; 3]>,
    /// Weights times 36, exact.
    pub w36: Vec<u32>,
    pub w: Vec<f64>,
    pub opposite: Vec<usize>,
    /// Direction pairs `(a, opposite(a))` with `a < opposite(a)`; the rest direction is index 0.
    pub pairs: Vec<(usize, usize)>,
}

pub fn make_stencil(kind: StencilKind) -> Stencil {
    let mut e: Vec<[i32; 3]> = vec![[0, 0, 0]];
    let mut w36: Vec<u32> = Vec::new();
    match kind {
        StencilKind::D3Q19 => {
            w36.push(12);
            for d in 0..3 {
                for s in [1, -1] {
                    let mut v = [0; 3];
                    v[d] = s;
                    e.push(v);
                    w36.push(2);
                }
            }
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                for (sa, sb) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
                    let mut v = [0; 3];
                    v[a] = sa;
                    v[b] = sb;
                    e.push(v);
                    w36.push(1);
                }
            }
        }
        StencilKind::D2Q9 => {
            w36.push(16);
            for v in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]] {
                e.push(v);
                w36.push(4);
            }
            for v in [[1, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0]] {
                e.push(v);
                w36.push(1);
            }
        }
    }
    let opposite: Vec<usize> = e
        .iter()
        .map(|v| e.iter().position(|o| o.iter().zip(v).all(|(a, b)| *a == -*b)).unwrap())
        .collect();
    let pairs = (0..e.len()).filter(|&a| a < opposite[a]).map(|a| (a, opposite[a])).collect();
    Stencil {
        kind,
        q: e.len(),
        w: w36.iter().map(|&w| w as f64 / 36.0).collect(),
        w36,
        ef: e.iter().map(|v| v.map(f64::from)).collect(),
        e,
        opposite,
        pairs,
    }
}

impl Stencil {
    #[inline]
    pub fn dot(&self, a: usize, u: [f64; 3]) -> f64 {
        let e = self.ef[a];
        e[0] * u[0] + e[1] * u[1] + e[2] * u[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrtParams {
    pub omega_even: f64,
    pub omega_odd: f64,
    pub magic: f64,
}

pub const DEFAULT_MAGIC: f64 = 3.0 / 16.0;

impl TrtParams {
    pub fn from_omega(omega_even: f64, magic: f64) -> LbmResult<Self> {
        if !(omega_even > 0.0 && omega_even < 2.0) {
            return Err(LbmError::BadOmega(omega_even));
        }
        if !(magic > 0.0) {
            return Err(LbmError::BadMagic(magic));
        }
        let omega_odd = 1.0 / (magic / (1.0 / omega_even - 0.5) + 0.5);
        Ok(Self {
            omega_even,
            omega_odd,
            magic,
        })
    }

    pub fn from_viscosity(nu: f64, magic: f64) -> LbmResult<Self> {
        if !(nu > 0.0) {
            return Err(LbmError::BadViscosity(nu));
        }
        Self::from_omega(1.0 / (3.0 * nu + 0.5), magic)
    }

    pub fn viscosity(&self) -> f64 {
        (1.0 / self.omega_even - 0.5) / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Macroscopic {
    pub rho: f64,
    pub u: [f64; 3],
}

pub fn equilibrium_into(rho: f64, u: [f64; 3], stencil: &Stencil, out: &mut [f64]) {
    let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    for (a, o) in out.iter_mut().enumerate().take(stencil.q) {
        let eu = stencil.dot(a, u);
        *o = stencil.w[a] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq);
    }
}

pub fn equilibrium(rho: f64, u: [f64; 3], stencil: &Stencil) -> Vec<f64> {
    let mut out = vec![0.0; stencil.q];
    equilibrium_into(rho, u, stencil, &mut out);
    out
}

/// Even part of the equilibrium, `(f_a^eq + f_abar^eq) / 2`.
#[inline]
pub fn equilibrium_even(w: f64, rho: f64, eu: f64, usq: f64) -> f64 {
    w * rho * (1.0 + 4.5 * eu * eu - 1.5 * usq)
}

pub fn macroscopic(f: &[f64], stencil: &Stencil) -> LbmResult<Macroscopic> {
    let (rho, j) = moments(f, stencil);
    if !(rho > 0.0) {
        return Err(LbmError::InvalidDensity(rho));
    }
    Ok(Macroscopic {
        rho,
        u: j.map(|v| v / rho),
    })
}

#[inline]
fn moments(f: &[f64], stencil: &Stencil) -> (f64, [f64; 3]) {
    let mut rho = 0.0;
    let mut j = [0.0; 3];
    for (a, &fa) in f.iter().enumerate().take(stencil.q) {
        rho += fa;
        let e = stencil.ef[a];
        j[0] += fa * e[0];
        j[1] += fa * e[1];
        j[2] += fa * e[2];
    }
    (rho, j)
}

/// One-cell TRT collision in place.
#[inline]
pub fn trt_collide(f: &mut [f64], params: &TrtParams, stencil: &Stencil) {
    let (rho, j) = moments(f, stencil);
    let u = j.map(|v| v / rho);
    let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    let (we, wo) = (params.omega_even, params.omega_odd);
    f[0] -= we * (f[0] - stencil.w[0] * rho * (1.0 - 1.5 * usq));
    for &(a, b) in &stencil.pairs {
        let eu = stencil.dot(a, u);
        let w = stencil.w[a];
        let feq_p = equilibrium_even(w, rho, eu, usq);
        let feq_m = w * rho * 3.0 * eu;
        let dp = we * (0.5 * (f[a] + f[b]) - feq_p);
        let dm = wo * (0.5 * (f[a] - f[b]) - feq_m);
        f[a] -= dp + dm;
        f[b] -= dp - dm;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Flag {
    Fluid,
    NoSlip,
    Pressure(f64),
    Velocity([f64; 3]),
    Gas,
    Interface,
    Obstacle,
}

pub mod tag {
    pub const FLUID: f64 = 0.0;
    pub const NOSLIP: f64 = 1.0;
    pub const PRESSURE: f64 = 2.0;
    pub const VELOCITY: f64 = 3.0;
    pub const GAS: f64 = 4.0;
    pub const INTERFACE: f64 = 5.0;
    pub const OBSTACLE: f64 = 6.0;
}

impl Flag {
    pub fn encode(self) -> [f64; 4] {
        match self {
            Flag::Fluid => [tag::FLUID, 0.0, 0.0, 0.0],
            Flag::NoSlip => [tag::NOSLIP, 0.0, 0.0, 0.0],
            Flag::Pressure(rho) => [tag::PRESSURE, rho, 0.0, 0.0],
            Flag::Velocity(u) => [tag::VELOCITY, u[0], u[1], u[2]],
            Flag::Gas => [tag::GAS, 0.0, 0.0, 0.0],
            Flag::Interface => [tag::INTERFACE, 0.0, 0.0, 0.0],
            Flag::Obstacle => [tag::OBSTACLE, 0.0, 0.0, 0.0],
        }
    }

    pub fn decode(v: [f64; 4]) -> LbmResult<Flag> {
        Ok(match v[0] {
            t if t == tag::FLUID => Flag::Fluid,
            t if t == tag::NOSLIP => Flag::NoSlip,
            t if t == tag::PRESSURE => Flag::Pressure(v[1]),
            t if t == tag::VELOCITY => Flag::Velocity([v[1], v[2], v[3]]),
            t if t == tag::GAS => Flag::Gas,
            t if t == tag::INTERFACE => Flag::Interface,
            t if t == tag::OBSTACLE => Flag::Obstacle,
            t => return Err(LbmError::UnknownFlag(t)),
        })
    }

    pub fn is_solid(self) -> bool {
        matches!(self, Flag::NoSlip | Flag::Obstacle | Flag::Pressure(_) | Flag::Velocity(_))
    }
}

pub fn read_flag(flags: &Field, x: isize, y: isize, z: isize) -> LbmResult<Flag> {
    Flag::decode([0, 1, 2, 3].map(|f| flags.get(x, y, z, f)))
}

pub fn write_flag(flags: &mut Field, x: isize, y: isize, z: isize, flag: Flag) {
    for (f, v) in flag.encode().into_iter().enumerate() {
        flags.set(x, y, z, f, v);
    }
}

/// Allocates the LBM fields on every block. Flags start as Fluid inside and
/// NoSlip in the ghost layer; domain-border ghosts keep NoSlip after exchanges.
pub fn add_lbm_fields(storage: &mut BlockStorage, stencil: &Stencil, layout: Layout, alignment: usize) -> LbmResult<()> {
    storage.add_field(PDF, stencil.q, 1, layout, alignment)?;
    storage.add_field(PDF_TMP, stencil.q, 1, layout, alignment)?;
    storage.add_field(FLAGS, 4, 1, Layout::AoS, 8)?;
    storage.add_field(DENSITY, 1, 0, Layout::AoS, 8)?;
    storage.add_field(VELOCITY, 3, 0, Layout::AoS, 8)?;
    for b in storage.blocks() {
        let mut flags = b[FLAGS].write();
        for [x, y, z] in flags.all_cells().collect::<Vec<_>>() {
            write_flag(&mut flags, x, y, z, Flag::NoSlip);
        }
        for [x, y, z] in flags.interior_cells().collect::<Vec<_>>() {
            write_flag(&mut flags, x, y, z, Flag::Fluid);
        }
    }
    Ok(())
}

pub fn set_cell_equilibrium(pdf: &mut Field, cell: [isize; 3], rho: f64, u: [f64; 3], stencil: &Stencil) {
    let mut feq = [0.0; 27];
    equilibrium_into(rho, u, stencil, &mut feq);
    for (a, &v) in feq.iter().enumerate().take(stencil.q) {
        pdf.set(cell[0], cell[1], cell[2], a, v);
    }
}

pub fn read_cell(pdf: &Field, cell: [isize; 3], out: &mut [f64]) {
    let base = pdf.cell_index(cell[0], cell[1], cell[2]);
    let sf = pdf.strides()[3];
    let data = pdf.data();
    for (a, o) in out.iter_mut().enumerate() {
        *o = data[base + a * sf];
    }
}

fn is_collided(t: f64) -> bool {
    t == tag::FLUID || t == tag::INTERFACE
}

fn contains_tag(flags: &Field, t: f64) -> bool {
    flags.all_cells().any(|[x, y, z]| flags.data()[flags.cell_index(x, y, z)] == t)
}

/// Collides every Fluid and Interface cell of a block in place.
///
/// For links whose upstream cell is a pressure boundary, the even
/// non-equilibrium term `(2 - omega_e) * n+` is computed from the
/// pre-collision state and parked in `tmp` at the slot the boundary rule will
/// overwrite. Without it the anti-bounce-back rule suppresses the shear part
/// of the even populations and shifts the imposed pressure.
pub fn collide_block(pdf: &mut Field, tmp: &mut Field, flags: &Field, params: &TrtParams, stencil: &Stencil) {
    match stencil.q {
        19 => collide_block_q::<19>(pdf, tmp, flags, params, stencil),
        9 => collide_block_q::<9>(pdf, tmp, flags, params, stencil),
        q => unreachable!("no stencil with {q} directions"),
    }
}

/// Fixed-size copies of the stencil tables for the hot loops.
struct Tables<const Q: usize> {
    e: [[f64; 3]; Q],
    w: [f64; Q],
    /// First and second member of each opposite pair.
    pa: [usize; Q],
    pb: [usize; Q],
    npairs: usize,
}

impl<const Q: usize> Tables<Q> {
    fn new(stencil: &Stencil) -> Self {
        assert_eq!(stencil.q, Q);
        Self {
            e: std::array::from_fn(|a| stencil.ef[a]),
            w: std::array::from_fn(|a| stencil.w[a]),
            pa: std::array::from_fn(|i| stencil.pairs.get(i).map_or(0, |p| p.0)),
            pb: std::array::from_fn(|i| stencil.pairs.get(i).map_or(0, |p| p.1)),
            npairs: stencil.pairs.len(),
        }
    }

    #[inline(always)]
    fn collide(&self, f: &mut [f64; Q], we: f64, wo: f64) {
        let mut rho = 0.0;
        let mut j = [0.0; 3];
        for a in 0..Q {
            rho += f[a];
            j[0] += f[a] * self.e[a][0];
            j[1] += f[a] * self.e[a][1];
            j[2] += f[a] * self.e[a][2];
        }
        let inv = 1.0 / rho;
        let u = [j[0] * inv, j[1] * inv, j[2] * inv];
        let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        f[0] -= we * (f[0] - self.w[0] * rho * (1.0 - 1.5 * usq));
        for i in 0..self.npairs {
            let (a, b) = (self.pa[i], self.pb[i]);
            let e = self.e[a];
            let eu = e[0] * u[0] + e[1] * u[1] + e[2] * u[2];
            let wr = self.w[a] * rho;
            let feq_p = wr * (1.0 + 4.5 * eu * eu - 1.5 * usq);
            let feq_m = wr * 3.0 * eu;
            let dp = we * (0.5 * (f[a] + f[b]) - feq_p);
            let dm = wo * (0.5 * (f[a] - f[b]) - feq_m);
            f[a] -= dp + dm;
            f[b] -= dp - dm;
        }
    }
}

fn collide_block_q<const Q: usize>(pdf: &mut Field, tmp: &mut Field, flags: &Field, params: &TrtParams, stencil: &Stencil) {
    let tables = Tables::<Q>::new(stencil);
    let sf = pdf.strides()[3];
    let [nx, ny, nz] = pdf.spatial_size().map(|v| v as isize);
    let pressure = contains_tag(flags, tag::PRESSURE);
    let foff = upstream_offsets(flags, stencil);
    let fl = flags.data();
    let mut f = [0.0; Q];
    for z in 0..nz {
        for y in 0..ny {
            let row_f = flags.cell_index(0, y, z);
            let row_p = pdf.cell_index(0, y, z);
            let (fsx, psx) = (flags.strides()[0], pdf.strides()[0]);
            for x in 0..nx as usize {
                let fc = row_f + x * fsx;
                if !is_collided(fl[fc]) {
                    continue;
                }
                let base = row_p + x * psx;
                let data = &mut pdf.data_mut()[base..=base + (Q - 1) * sf];
                for a in 0..Q {
                    f[a] = data[a * sf];
                }
                if pressure {
                    pressure_correction(&f, fc, &foff, flags, base, sf, tmp, params, stencil);
                }
                let data = &mut pdf.data_mut()[base..=base + (Q - 1) * sf];
                tables.collide(&mut f, params.omega_even, params.omega_odd);
                for a in 0..Q {
                    data[a * sf] = f[a];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn pressure_correction(
    f: &[f64],
    fc: usize,
    foff: &[isize],
    flags: &Field,
    base: usize,
    sf: usize,
    tmp: &mut Field,
    params: &TrtParams,
    stencil: &Stencil,
) {
    let mut u = None;
    for a in 1..stencil.q {
        if flags.data()[(fc as isize + foff[a]) as usize] != tag::PRESSURE {
            continue;
        }
        let (rho, u) = *u.get_or_insert_with(|| {
            let (rho, j) = moments(f, stencil);
            (rho, j.map(|v| v / rho))
        });
        let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        let eq = equilibrium_even(stencil.w[a], rho, stencil.dot(a, u), usq);
        let n_plus = 0.5 * (f[a] + f[stencil.opposite[a]]) - eq;
        tmp.data_mut()[base + a * sf] = (2.0 - params.omega_even) * n_plus;
    }
}

/// Signed offsets of the upstream cell `x - e_a`, in element units of `field`.
fn upstream_offsets(field: &Field, stencil: &Stencil) -> Vec<isize> {
    let s = field.strides().map(|v| v as isize);
    stencil
        .e
        .iter()
        .map(|e| -(e[0] as isize * s[0] + e[1] as isize * s[1] + e[2] as isize * s[2]))
        .collect()
}

#[derive(Clone, Copy)]
struct Passes {
    stream: bool,
    boundaries: bool,
}

fn stream_kernel(src: &Field, dst: &mut Field, flags: &Field, stencil: &Stencil, passes: Passes) -> LbmResult<()> {
    match stencil.q {
        19 => stream_kernel_q::<19>(src, dst, flags, stencil, passes),
        9 => stream_kernel_q::<9>(src, dst, flags, stencil, passes),
        q => unreachable!("no stencil with {q} directions"),
    }
}

fn stream_kernel_q<const Q: usize>(
    src: &Field,
    dst: &mut Field,
    flags: &Field,
    stencil: &Stencil,
    passes: Passes,
) -> LbmResult<()> {
    let tables = Tables::<Q>::new(stencil);
    let sf = src.strides()[3];
    let fsf = flags.strides()[3];
    let off: [isize; Q] = upstream_offsets(src, stencil).try_into().unwrap();
    let foff: [isize; Q] = upstream_offsets(flags, stencil).try_into().unwrap();
    let opp: [usize; Q] = std::array::from_fn(|a| stencil.opposite[a]);
    let [nx, ny, nz] = src.spatial_size().map(|v| v as isize);
    let (fsx, psx) = (flags.strides()[0], src.strides()[0]);
    let s = src.data();
    let fl = flags.data();
    let d = dst.data_mut();
    let mut cell = [0.0; Q];
    for z in 0..nz {
        for y in 0..ny {
            let row_f = flags.cell_index(0, y, z);
            let row_p = src.cell_index(0, y, z);
            for x in 0..nx as usize {
                let fc = row_f + x * fsx;
                if !is_collided(fl[fc]) {
                    continue;
                }
                let pc = row_p + x * psx;
                let mut u_cell: Option<[f64; 3]> = None;
                for a in 0..Q {
                    let up = (fc as isize + foff[a]) as usize;
                    let t = fl[up];
                    let out = pc + a * sf;
                    if t == tag::FLUID || t == tag::INTERFACE {
                        if passes.stream {
                            d[out] = s[(pc as isize + off[a]) as usize + a * sf];
                        }
                        continue;
                    }
                    if t == tag::GAS || !passes.boundaries {
                        // gas links are reconstructed by the free-surface step
                        continue;
                    }
                    let bounced = s[pc + opp[a] * sf];
                    let e = tables.e[a];
                    if t == tag::NOSLIP || t == tag::OBSTACLE {
                        d[out] = bounced;
                    } else if t == tag::PRESSURE {
                        let rho_w = fl[up + fsf];
                        let u = *u_cell.get_or_insert_with(|| {
                            for (b, c) in cell.iter_mut().enumerate() {
                                *c = s[pc + b * sf];
                            }
                            let (rho, j) = moments(&cell, stencil);
                            j.map(|v| v / rho)
                        });
                        let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
                        let eu = e[0] * u[0] + e[1] * u[1] + e[2] * u[2];
                        d[out] = -bounced + 2.0 * equilibrium_even(tables.w[a], rho_w, eu, usq) + d[out];
                    } else if t == tag::VELOCITY {
                        let uw = [fl[up + fsf], fl[up + 2 * fsf], fl[up + 3 * fsf]];
                        let eu = e[0] * uw[0] + e[1] * uw[1] + e[2] * uw[2];
                        d[out] = bounced + 6.0 * tables.w[a] * REFERENCE_DENSITY * eu;
                    } else {
                        return Err(LbmError::UnknownFlag(t));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Density used in the moving-wall momentum correction.
pub const REFERENCE_DENSITY: f64 = 1.0;

/// Pull streaming for links whose upstream cell is Fluid or Interface.
/// Links from boundary cells are left to [`apply_boundaries`]; links from Gas
/// cells are left to the free-surface reconstruction.
pub fn stream_pull(src: &Field, dst: &mut Field, flags: &Field, stencil: &Stencil) -> LbmResult<()> {
    stream_kernel(
        src,
        dst,
        flags,
        stencil,
        Passes {
            stream: true,
            boundaries: false,
        },
    )
}

/// Fills links whose upstream cell is NoSlip, Obstacle, Pressure or Velocity.
/// Pressure links add the correction term left in `dst` by [`collide_block`].
pub fn apply_boundaries(dst: &mut Field, src: &Field, flags: &Field, stencil: &Stencil) -> LbmResult<()> {
    stream_kernel(
        src,
        dst,
        flags,
        stencil,
        Passes {
            stream: false,
            boundaries: true,
        },
    )
}

/// Streaming and boundaries in one sweep.
pub fn stream_and_bounce(src: &Field, dst: &mut Field, flags: &Field, stencil: &Stencil) -> LbmResult<()> {
    stream_kernel(
        src,
        dst,
        flags,
        stencil,
        Passes {
            stream: true,
            boundaries: true,
        },
    )
}

pub fn swap_pdfs(block: &Block) -> LbmResult<()> {
    let mut a = block.field(PDF)?.write();
    let mut b = block.field(PDF_TMP)?.write();
    a.swap_buffers(&mut b).expect("pdf fields share a shape");
    Ok(())
}

/// Collide, exchange, stream with boundaries, swap.
pub fn lbm_timestep<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    params: &TrtParams,
    stencil: &Stencil,
    transport: &T,
) -> LbmResult<()> {
    let worker = plan.worker();
    for b in storage.local_blocks(worker)? {
        let flags = b.field(FLAGS)?.read();
        let mut tmp = b.field(PDF_TMP)?.write();
        collide_block(&mut b.field(PDF)?.write(), &mut tmp, &flags, params, stencil);
    }
    exchange_ghost_layers(storage, plan, &[PDF], transport)?;
    for b in storage.local_blocks(worker)? {
        let flags = b.field(FLAGS)?.read();
        let src = b.field(PDF)?.read();
        stream_and_bounce(&src, &mut b.field(PDF_TMP)?.write(), &flags, stencil)?;
    }
    for b in storage.local_blocks(worker)? {
        swap_pdfs(b)?;
    }
    Ok(())
}

/// Recomputes `density` and `velocity` from `pdf`. Cells that are neither
/// Fluid nor Interface get zero density and velocity.
pub fn update_macroscopic(block: &Block, stencil: &Stencil) -> LbmResult<()> {
    let pdf = block.field(PDF)?.read();
    let flags = block.field(FLAGS)?.read();
    let mut rho_f = block.field(DENSITY)?.write();
    let mut vel_f = block.field(VELOCITY)?.write();
    let mut f = [0.0; 27];
    for [x, y, z] in pdf.interior_cells() {
        let (rho, u) = if is_collided(flags.get(x, y, z, 0)) {
            read_cell(&pdf, [x, y, z], &mut f[..stencil.q]);
            let (rho, j) = moments(&f[..stencil.q], stencil);
            (rho, j.map(|v| v / rho))
        } else {
            (0.0, [0.0; 3])
        };
        rho_f.set(x, y, z, 0, rho);
        for d in 0..3 {
            vel_f.set(x, y, z, d, u[d]);
        }
    }
    Ok(())
}
