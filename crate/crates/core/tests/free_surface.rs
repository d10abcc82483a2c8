use std::collections::{HashMap, VecDeque};

use blockforge_core::blockgrid::BlockStorage;
use blockforge_core::comms::{exchange_ghost_layers, run_workers, ExchangePlan, LocalTransport, Transport};
use blockforge_core::field::Layout;
use blockforge_core::freesurface::*;
use blockforge_core::lbm::*;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

fn exact(vals: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = BigRational::zero();
    for v in vals {
        s += BigRational::from_float(v).unwrap();
    }
    s.to_f64().unwrap()
}

/// Box with walls on all sides; `phi` and `u` give the initial fill and velocity.
fn setup(
    n: [usize; 3],
    block: [usize; 3],
    workers: usize,
    params: &FreeSurfaceParams,
    phi: impl Fn([i64; 3]) -> f64,
    u: impl Fn([i64; 3]) -> [f64; 3],
) -> (BlockStorage, Stencil) {
    let s = make_stencil(StencilKind::D3Q19);
    let mut st = BlockStorage::uniform(n, block, [false; 3], workers).unwrap();
    add_lbm_fields(&mut st, &s, Layout::AoS, 8).unwrap();
    add_free_surface_fields(&mut st, params).unwrap();
    for b in st.blocks() {
        let mut fill = b[FILL].write();
        let mut pdf = b[PDF].write();
        for c in fill.interior_cells().collect::<Vec<_>>() {
            let g = b.to_global(c);
            fill.set(c[0], c[1], c[2], 0, phi(g));
            set_cell_equilibrium(&mut pdf, c, 1.0, u(g), &s);
        }
    }
    (st, s)
}

fn liquid_mass(st: &BlockStorage) -> f64 {
    let mut m = Vec::new();
    for b in st.blocks() {
        let flags = b[FLAGS].read();
        let mass = b[MASS].read();
        for [x, y, z] in flags.interior_cells() {
            let t = flags.get(x, y, z, 0);
            if t == tag::FLUID || t == tag::INTERFACE {
                m.push(mass.get(x, y, z, 0));
            }
        }
    }
    exact(m)
}

fn gas_volume(st: &BlockStorage) -> f64 {
    let mut v = Vec::new();
    for b in st.blocks() {
        let flags = b[FLAGS].read();
        let fill = b[FILL].read();
        for [x, y, z] in flags.interior_cells() {
            let t = flags.get(x, y, z, 0);
            if t == tag::GAS {
                v.push(1.0);
            } else if t == tag::INTERFACE {
                v.push(1.0 - fill.get(x, y, z, 0));
            }
        }
    }
    exact(v)
}

#[test]
fn resting_pool_two_workers() {
    let params = FreeSurfaceParams::default();
    let (st, s) = setup([12, 12, 16], [12, 12, 8], 2, &params, |g| (7.3 - g[2] as f64).clamp(0.0, 1.0), |_| [0.0; 3]);
    let trt = TrtParams::from_omega(1.8, DEFAULT_MAGIC).unwrap();
    run_workers(2, |t| {
        let plan = ExchangePlan::new(&st, t.rank()).unwrap();
        let mut reg = BubbleRegistry::default();
        init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
        for step in 1..=100 {
            fslbm_timestep(&st, &plan, &trt, &params, &s, &mut reg, step, &t).unwrap();
        }
    });
    let mut umax: f64 = 0.0;
    for b in st.blocks() {
        update_macroscopic(b, &s).unwrap();
        let v = b[VELOCITY].read();
        for [x, y, z] in v.interior_cells() {
            for d in 0..3 {
                umax = umax.max(v.get(x, y, z, d).abs());
            }
        }
    }
    assert!(umax <= 1e-10, "max |u| = {umax}");
}

#[test]
fn sloshing_conserves_mass_and_keeps_layer_closed() {
    let params = FreeSurfaceParams::default();
    let (st, s) = setup(
        [16; 3],
        [16; 3],
        1,
        &params,
        |g| (6.5 - g[2] as f64).clamp(0.0, 1.0),
        |_| [0.05, 0.0, 0.0],
    );
    let trt = TrtParams::from_omega(1.6, DEFAULT_MAGIC).unwrap();
    let t = LocalTransport::solo();
    let plan = ExchangePlan::new(&st, 0).unwrap();
    let mut reg = BubbleRegistry::default();
    init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
    let m0 = liquid_mass(&st);
    let mut conversions = 0;
    for step in 1..=1000 {
        let stats = fslbm_timestep(&st, &plan, &trt, &params, &s, &mut reg, step, &t).unwrap();
        conversions += stats.to_liquid + stats.to_gas;
        assert_eq!(stats.lost_mass, 0.0);
        assert!(closed_layer_holds(&st.blocks()[0]).unwrap(), "step {step}");
    }
    let drift = ((liquid_mass(&st) - m0) / m0).abs();
    assert!(drift <= 1e-9, "mass drift {drift}");
    assert!(conversions > 0, "no interface motion");
}

#[test]
fn sloshing_across_blocks() {
    let params = FreeSurfaceParams::default();
    let (st, s) = setup(
        [16; 3],
        [8; 3],
        2,
        &params,
        |g| (6.5 - g[2] as f64 + 0.2 * g[0] as f64).clamp(0.0, 1.0),
        |_| [0.04, 0.02, 0.0],
    );
    let trt = TrtParams::from_omega(1.6, DEFAULT_MAGIC).unwrap();
    let m0 = std::sync::Mutex::new(0.0);
    run_workers(2, |t| {
        let plan = ExchangePlan::new(&st, t.rank()).unwrap();
        let mut reg = BubbleRegistry::default();
        init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
        if t.is_root() {
            *m0.lock().unwrap() = liquid_mass(&st);
        }
        for step in 1..=150 {
            fslbm_timestep(&st, &plan, &trt, &params, &s, &mut reg, step, &t).unwrap();
            for b in st.local_blocks(t.rank()).unwrap() {
                assert!(closed_layer_holds(b).unwrap());
            }
        }
    });
    let m0 = *m0.lock().unwrap();
    assert!(((liquid_mass(&st) - m0) / m0).abs() <= 1e-9);
}

#[test]
fn all_liquid_matches_plain_lbm() {
    let n = 12;
    let s = make_stencil(StencilKind::D3Q19);
    let trt = TrtParams::from_omega(1.5, DEFAULT_MAGIC).unwrap();
    let init = |st: &BlockStorage| {
        for b in st.blocks() {
            let mut pdf = b[PDF].write();
            let mut fill = b[FILL].write();
            for c in pdf.interior_cells().collect::<Vec<_>>() {
                let g = b.to_global(c);
                let h = ((g[0] * 7 + g[1] * 3 + g[2] * 5) % 11) as f64;
                set_cell_equilibrium(&mut pdf, c, 1.0 + 0.002 * h, [0.002 * h, 0.0, -0.001 * h], &s);
                fill.set(c[0], c[1], c[2], 0, 1.0);
            }
        }
    };
    let build = || {
        let mut st = BlockStorage::uniform([n; 3], [6; 3], [true; 3], 2).unwrap();
        add_lbm_fields(&mut st, &s, Layout::AoS, 8).unwrap();
        add_free_surface_fields(&mut st, &FreeSurfaceParams::default()).unwrap();
        init(&st);
        st
    };
    let plain = build();
    let fs = build();
    run_workers(2, |t| {
        let plan = ExchangePlan::new(&plain, t.rank()).unwrap();
        exchange_ghost_layers(&plain, &plan, &[FLAGS], &t).unwrap();
        for _ in 0..40 {
            lbm_timestep(&plain, &plan, &trt, &s, &t).unwrap();
        }
        let plan = ExchangePlan::new(&fs, t.rank()).unwrap();
        let mut reg = BubbleRegistry::default();
        let params = FreeSurfaceParams::default();
        init_free_surface(&fs, &plan, &s, &mut reg, &t).unwrap();
        for step in 1..=40 {
            fslbm_timestep(&fs, &plan, &trt, &params, &s, &mut reg, step, &t).unwrap();
        }
    });
    for (a, b) in plain.blocks().iter().zip(fs.blocks()) {
        let (pa, pb) = (a[PDF].read(), b[PDF].read());
        for [x, y, z] in pa.interior_cells() {
            for q in 0..19 {
                assert_eq!(pa.get(x, y, z, q).to_bits(), pb.get(x, y, z, q).to_bits());
            }
        }
    }
}

fn sphere_fill(c: [f64; 3], r: f64) -> impl Fn([i64; 3]) -> f64 {
    move |g| {
        let d = ((g[0] as f64 - c[0]).powi(2) + (g[1] as f64 - c[1]).powi(2) + (g[2] as f64 - c[2]).powi(2)).sqrt();
        (d - r + 0.5).clamp(0.0, 1.0)
    }
}

#[test]
fn bubble_volume_identity_at_relabel_steps() {
    let params = FreeSurfaceParams::new(0.0, 1e-2, 10).unwrap();
    let (st, s) = setup(
        [24; 3],
        [12; 3],
        2,
        &params,
        sphere_fill([11.5, 11.7, 11.3], 8.0),
        |g| [0.0, 0.0, 0.01 * ((g[0] as f64) * 0.3).sin()],
    );
    let trt = TrtParams::from_omega(1.7, DEFAULT_MAGIC).unwrap();
    run_workers(2, |t| {
        let plan = ExchangePlan::new(&st, t.rank()).unwrap();
        let mut reg = BubbleRegistry::default();
        init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
        for step in 1..=60 {
            fslbm_timestep(&st, &plan, &trt, &params, &s, &mut reg, step, &t).unwrap();
            if step % params.relabel_interval == 0 {
                assert_eq!(reg.len(), 1);
                let v = reg.bubbles().next().unwrap().v;
                t.barrier_sync();
                if t.is_root() {
                    assert_eq!(v.to_bits(), gas_volume(&st).to_bits(), "step {step}");
                }
                t.barrier_sync();
            }
        }
    });
}

trait Sync2 {
    fn barrier_sync(&self);
}

impl<T: Transport> Sync2 for T {
    fn barrier_sync(&self) {
        blockforge_core::comms::barrier(self).unwrap();
    }
}

#[test]
fn forced_compression_pressure() {
    let params = FreeSurfaceParams::default();
    let (st, s) = setup([24; 3], [24; 3], 1, &params, sphere_fill([11.5, 11.5, 11.5], 8.0), |_| [0.0; 3]);
    let t = LocalTransport::solo();
    let plan = ExchangePlan::new(&st, 0).unwrap();
    let mut reg = BubbleRegistry::default();
    init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
    let id = reg.bubbles().next().unwrap().id;
    let b = reg.get_mut(id).unwrap();
    assert_eq!(b.v0, b.v);
    b.v = 0.9 * b.v0;
    assert_eq!(reg.pressure(id).unwrap(), 1.0 / 0.9);
}

/// Flood fill over gas and interface cells of a single-block storage.
fn flood_fill_volumes(st: &BlockStorage) -> Vec<f64> {
    let b = &st.blocks()[0];
    let flags = b[FLAGS].read();
    let fill = b[FILL].read();
    let cells: Vec<[isize; 3]> = flags
        .interior_cells()
        .filter(|&[x, y, z]| {
            let t = flags.get(x, y, z, 0);
            t == tag::GAS || t == tag::INTERFACE
        })
        .collect();
    let mut seen: HashMap<[isize; 3], bool> = cells.iter().map(|&c| (c, false)).collect();
    let mut out = Vec::new();
    for &c in &cells {
        if seen[&c] {
            continue;
        }
        let mut vols = Vec::new();
        let mut queue = VecDeque::from([c]);
        seen.insert(c, true);
        while let Some(p) = queue.pop_front() {
            let [x, y, z] = p;
            vols.push(if flags.get(x, y, z, 0) == tag::GAS { 1.0 } else { 1.0 - fill.get(x, y, z, 0) });
            for d in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                let q = [x + d[0], y + d[1], z + d[2]];
                if seen.get(&q) == Some(&false) {
                    seen.insert(q, true);
                    queue.push_back(q);
                }
            }
        }
        out.push(exact(vols));
    }
    out.sort_by(f64::total_cmp);
    out
}

#[test]
fn dumbbell_split() {
    let params = FreeSurfaceParams::default();
    let (lo, hi) = (sphere_fill([8.5, 12.5, 12.5], 5.0), sphere_fill([23.5, 12.5, 12.5], 6.0));
    let neck = |g: [i64; 3]| {
        let r2 = (g[1] as f64 - 12.5).powi(2) + (g[2] as f64 - 12.5).powi(2);
        if (8..=23).contains(&g[0]) && r2 <= 2.0 {
            0.0
        } else {
            1.0
        }
    };
    let (st, s) = setup([32, 25, 25], [32, 25, 25], 1, &params, move |g| lo(g).min(hi(g)).min(neck(g)), |_| [0.0; 3]);
    let t = LocalTransport::solo();
    let plan = ExchangePlan::new(&st, 0).unwrap();
    let mut reg = BubbleRegistry::default();
    init_free_surface(&st, &plan, &s, &mut reg, &t).unwrap();
    assert_eq!(reg.len(), 1);
    let v0 = reg.bubbles().next().unwrap().v0;
    {
        // pinch the neck: liquid plane at x = 16, interface fill 1 at x = 15 and 17
        let b = &st.blocks()[0];
        let mut flags = b[FLAGS].write();
        let mut fill = b[FILL].write();
        let mut ids = b[BUBBLE_ID].write();
        for c in flags.interior_cells().collect::<Vec<_>>() {
            let [x, y, z] = c;
            if !(15..=17).contains(&x) || flags.get(x, y, z, 0) == tag::FLUID {
                continue;
            }
            let t = if x == 16 { tag::FLUID } else { tag::INTERFACE };
            write_flag(&mut flags, x, y, z, if t == tag::FLUID { Flag::Fluid } else { Flag::Interface });
            fill.set(x, y, z, 0, 1.0);
            if t == tag::FLUID {
                ids.set(x, y, z, 0, NO_BUBBLE);
            }
        }
    }
    relabel(&st, &plan, &mut reg, &t).unwrap();
    assert_eq!(reg.len(), 2);
    let mut got: Vec<f64> = reg.bubbles().map(|b| b.v).collect();
    got.sort_by(f64::total_cmp);
    assert_eq!(got, flood_fill_volumes(&st));
    let v0s: Vec<f64> = reg.bubbles().map(|b| b.v0).collect();
    assert!((v0s[0] + v0s[1] - v0).abs() <= 1e-12 * v0);
    let total: f64 = got.iter().sum();
    for b in reg.bubbles() {
        assert!((b.v0 / v0 - b.v / total).abs() <= 1e-12);
    }
    assert!(closed_layer_holds(&st.blocks()[0]).unwrap());
    let ids = st.blocks()[0][BUBBLE_ID].read();
    let (a, c) = (ids.get(8, 12, 12, 0), ids.get(23, 12, 12, 0));
    assert!(a >= 0.0 && c >= 0.0 && a != c);
}
