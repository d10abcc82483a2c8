use std::collections::HashSet;

use blockforge_core::blockgrid::*;
use blockforge_core::comms::*;
use blockforge_core::field::{Field, Layout};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout() -> impl Strategy<Value = Layout> {
    prop_oneof![Just(Layout::AoS), Just(Layout::SoA)]
}

proptest! {
    #[test]
    fn element_index_is_injective(
        size in [1usize..5, 1usize..5, 1usize..5, 1usize..4],
        g in 0usize..3,
        layout in layout(),
        align in prop_oneof![Just(8usize), Just(32), Just(64)],
    ) {
        let f = Field::new("f", size, g, layout, align).unwrap();
        let g = g as isize;
        let mut seen = HashSet::new();
        for z in -g..size[2] as isize + g {
            for y in -g..size[1] as isize + g {
                for x in -g..size[0] as isize + g {
                    for q in 0..size[3] as isize {
                        let i = f.element_index(x, y, z, q).unwrap();
                        prop_assert!(i < f.data().len());
                        prop_assert!(seen.insert(i));
                    }
                }
            }
        }
        prop_assert!(f.element_index(-g - 1, 0, 0, 0).is_err());
        prop_assert!(f.element_index(0, 0, 0, size[3] as isize).is_err());
    }

    #[test]
    fn padding_does_not_change_values(
        size in [1usize..6, 1usize..5, 1usize..5, 1usize..3],
        g in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut a = Field::new("a", size, g, Layout::SoA, 8).unwrap();
        let mut b = Field::new("b", size, g, Layout::SoA, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in a.all_cells().collect::<Vec<_>>() {
            for q in 0..size[3] {
                let v: f64 = rng.gen();
                a.set(c[0], c[1], c[2], q, v);
                b.set(c[0], c[1], c[2], q, v);
            }
        }
        for c in a.all_cells() {
            for q in 0..size[3] {
                prop_assert_eq!(a.get(c[0], c[1], c[2], q).to_bits(), b.get(c[0], c[1], c[2], q).to_bits());
            }
        }
    }

    #[test]
    fn descriptor_round_trip(size in [1usize..5, 1usize..5, 1usize..5, 1usize..4], layout in layout(), g in 0usize..2) {
        let mut f = Field::new("f", size, g, layout, 32).unwrap();
        let desc = f.export_array_view(true);
        let mut k = 0.0;
        for idx in desc.indices().collect::<Vec<_>>() {
            desc.write(f.data_mut(), idx, k).unwrap();
            k += 1.0;
        }
        let mut k = 0.0;
        for idx in desc.indices() {
            prop_assert_eq!(f.get(idx[0] as isize, idx[1] as isize, idx[2] as isize, idx[3]), k);
            k += 1.0;
        }
    }

    #[test]
    fn blocks_tile_the_domain(
        grid in [1usize..4, 1usize..4, 1usize..4],
        bs in [1usize..4, 1usize..4, 1usize..4],
        drop_mask in any::<u64>(),
    ) {
        let global = [0, 1, 2].map(|d| grid[d] * bs[d]);
        let keep = |iv: &CellInterval| {
            let id = iv.min[0] as usize / bs[0] + grid[0] * (iv.min[1] as usize / bs[1] + grid[1] * (iv.min[2] as usize / bs[2]));
            drop_mask >> (id % 64) & 1 == 0
        };
        let st = BlockStorage::new(global, bs, [false; 3], 2, keep, |b| b.interval().num_cells() as f64).unwrap();
        for z in 0..global[2] as i64 {
            for y in 0..global[1] as i64 {
                for x in 0..global[0] as i64 {
                    let c = [x, y, z];
                    let owners = st.blocks().iter().filter(|b| b.interval().contains(c)).count();
                    let candidate = decompose_domain(global, bs, |_| true).unwrap()
                        .into_iter().find(|b| b.interval().contains(c)).unwrap();
                    prop_assert_eq!(owners, usize::from(keep(candidate.interval())));
                }
            }
        }
        prop_assert_eq!(st.cell_count(), global);
    }

    #[test]
    fn lpt_within_bound_of_optimum(weights in prop::collection::vec(1u32..20, 1..=8), workers in 1usize..4) {
        let w: Vec<(usize, f64)> = weights.iter().enumerate().map(|(i, &v)| (i, v as f64)).collect();
        let a = lpt_assign(&w, workers);
        prop_assert_eq!(&a, &lpt_assign(&w, workers));
        let mut loads = vec![0.0; workers];
        for (id, wk) in &a {
            loads[*wk] += w[*id].1;
        }
        let lpt = loads.iter().cloned().fold(0.0, f64::max);
        // brute force over all assignments
        let n = w.len();
        let mut best = f64::INFINITY;
        for code in 0..workers.pow(n as u32) {
            let mut l = vec![0.0; workers];
            let mut c = code;
            for item in &w {
                l[c % workers] += item.1;
                c /= workers;
            }
            best = best.min(l.iter().cloned().fold(0.0, f64::max));
        }
        let bound = (4.0 / 3.0 - 1.0 / (3.0 * workers as f64)) * best;
        prop_assert!(lpt <= bound + 1e-9, "lpt {} opt {}", lpt, best);
    }
}

#[test]
fn lpt_example_loads() {
    let a = lpt_assign(&[(0, 4.0), (1, 3.0), (2, 3.0), (3, 2.0)], 2);
    let mut loads = [0.0; 2];
    for (id, w) in a {
        loads[w] += [4.0, 3.0, 3.0, 2.0][id];
    }
    assert_eq!(loads, [6.0, 6.0]);
}

fn value(g: [i64; 3], q: usize) -> f64 {
    (g[0] + 100 * g[1] + 10_000 * g[2]) as f64 + 0.25 * q as f64
}

/// Every ghost cell that maps to a domain cell must hold that cell's value.
fn check_ghosts(periodic: [bool; 3], workers: usize) {
    let mut st = BlockStorage::uniform([8, 8, 8], [4, 4, 4], periodic, workers).unwrap();
    st.add_field("v", 2, 2, Layout::SoA, 32).unwrap();
    for b in st.blocks() {
        let mut f = b["v"].write();
        f.fill(-1.0);
        for c in f.interior_cells().collect::<Vec<_>>() {
            for q in 0..2 {
                f.set(c[0], c[1], c[2], q, value(b.to_global(c), q));
            }
        }
    }
    run_workers(workers, |t| {
        let plan = ExchangePlan::new(&st, t.rank()).unwrap();
        exchange_ghost_layers(&st, &plan, &["v"], &t).unwrap();
        exchange_ghost_layers(&st, &plan, &["v"], &t).unwrap();
    });
    let mut checked = 0;
    for b in st.blocks() {
        let f = b["v"].read();
        for c in f.all_cells() {
            let g = b.to_global(c);
            for q in 0..2 {
                let got = f.get(c[0], c[1], c[2], q);
                match st.wrap_cell(g) {
                    Some(w) => {
                        assert_eq!(got, value(w, q), "block {} cell {c:?}", b.id());
                        checked += 1;
                    }
                    None => assert_eq!(got, -1.0),
                }
            }
        }
    }
    assert!(checked > 8 * 8 * 8 * 2);
}

#[test]
fn eight_block_exchange_matches_global_oracle() {
    check_ghosts([true; 3], 1);
    check_ghosts([true; 3], 4);
    check_ghosts([false, true, false], 3);
}

#[test]
fn reduce_matches_serial_fold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vals: Vec<f64> = (0..100).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let chunks: Vec<&[f64]> = vals.chunks(25).collect();
    for op in [ReduceOp::Min, ReduceOp::Max, ReduceOp::Sum] {
        let out = run_workers(4, |t| {
            let local = chunks[t.rank()].iter().copied().reduce(|a, b| op.apply(a, b)).unwrap();
            reduce_scalar(&t, local, op).unwrap()
        });
        let serial = chunks
            .iter()
            .map(|c| c.iter().copied().reduce(|a, b| op.apply(a, b)).unwrap())
            .reduce(|a, b| op.apply(a, b))
            .unwrap();
        assert_eq!(out[0], Some(serial));
        assert!(out[1..].iter().all(Option::is_none));
        let flat = vals.iter().copied().reduce(|a, b| op.apply(a, b)).unwrap();
        assert!((serial - flat).abs() <= 1e-12);
    }
}

#[test]
fn gather_slice_independent_of_workers() {
    let run = |workers: usize, block: usize| {
        let mut st = BlockStorage::uniform([8, 8, 100], [8, 8, block], [false; 3], workers).unwrap();
        st.add_field("v", 3, 1, Layout::AoS, 8).unwrap();
        for b in st.blocks() {
            let mut f = b["v"].write();
            for c in f.interior_cells().collect::<Vec<_>>() {
                f.set(c[0], c[1], c[2], 1, value(b.to_global(c), 1));
            }
        }
        run_workers(workers, |t| gather_slice(&st, LineSpec::along_z(4, 4), "v", 1, 4, &t).unwrap())
            .remove(0)
            .unwrap()
    };
    let one = run(1, 100);
    assert_eq!(one.len(), 25);
    let four = run(4, 25);
    assert_eq!(one.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), four.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(one[3], value([4, 4, 12], 1));
}

#[test]
fn broadcast_large_multiline_command() {
    let mut text = String::new();
    let mut i = 0;
    while text.len() < 10 * 1024 {
        text.push_str(&format!("let x{i} = {i} * 2; // line {i}\n"));
        i += 1;
    }
    let out = run_workers(4, |t| broadcast_line(&t, t.is_root().then_some(text.as_str())).unwrap());
    for o in out {
        assert_eq!(o.as_bytes(), text.as_bytes());
    }
    let empty = run_workers(3, |t| broadcast_line(&t, t.is_root().then_some("")).unwrap());
    assert!(empty.iter().all(String::is_empty));
}
