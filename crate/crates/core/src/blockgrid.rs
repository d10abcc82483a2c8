//! Uniform block decomposition of the global cell domain.
//!
//! The global box is cut into equally sized blocks. Blocks rejected by a
//! predicate are dropped, the rest are assigned to workers by a greedy
//! longest-processing-time rule, and every block carries its named fields.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::field::{Field, FieldError, Layout, SharedField};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("block size {block:?} does not divide global size {global:?}")]
    NotDivisible { global: [usize; 3], block: [usize; 3] },
    #[error("sizes must be positive: global {global:?}, block {block:?}")]
    ZeroSize { global: [usize; 3], block: [usize; 3] },
    #[error("unknown worker {worker} (worker count {count})")]
    UnknownWorker { worker: usize, count: usize },
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("block {block} has no field named '{name}'")]
    MissingField { block: usize, name: String },
    #[error("field '{name}' has spatial size {got:?}, block {block} expects {expected:?}")]
    FieldSize {
        block: usize,
        name: String,
        got: [usize; 3],
        expected: [usize; 3],
    },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Axis-aligned cell box with inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellInterval {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

impl CellInterval {
    pub fn new(min: [i64; 3], max: [i64; 3]) -> Self {
        debug_assert!((0..3).all(|d| min[d] <= max[d]));
        Self { min, max }
    }

    pub fn size(&self) -> [usize; 3] {
        [0, 1, 2].map(|d| (self.max[d] - self.min[d] + 1) as usize)
    }

    pub fn num_cells(&self) -> usize {
        self.size().iter().product()
    }

    pub fn contains(&self, cell: [i64; 3]) -> bool {
        (0..3).all(|d| cell[d] >= self.min[d] && cell[d] <= self.max[d])
    }

    /// Cells in z-major order (x fastest).
    pub fn cells(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        let (lo, hi) = (self.min, self.max);
        (lo[2]..=hi[2]).flat_map(move |z| (lo[1]..=hi[1]).flat_map(move |y| (lo[0]..=hi[0]).map(move |x| [x, y, z])))
    }

    pub fn intersects(&self, other: &CellInterval) -> bool {
        (0..3).all(|d| self.min[d] <= other.max[d] && other.min[d] <= self.max[d])
    }
}

/// Unit of decomposition. Owns the per-block fields.
#[derive(Debug, Clone)]
pub struct Block {
    id: usize,
    grid_coord: [usize; 3],
    interval: CellInterval,
    weight: f64,
    fields: BTreeMap<String, SharedField>,
}

impl Block {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn grid_coord(&self) -> [usize; 3] {
        self.grid_coord
    }

    pub fn interval(&self) -> &CellInterval {
        &self.interval
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn size(&self) -> [usize; 3] {
        self.interval.size()
    }

    /// Attaches a field; its spatial size must match the block.
    pub fn add_field(&mut self, field: Field) -> Result<SharedField, GridError> {
        let got = field.spatial_size();
        if got != self.size() {
            return Err(GridError::FieldSize {
                block: self.id,
                name: field.name().to_string(),
                got,
                expected: self.size(),
            });
        }
        let name = field.name().to_string();
        let shared = field.into_shared();
        self.fields.insert(name, shared.clone());
        Ok(shared)
    }

    pub fn field(&self, name: &str) -> Result<&SharedField, GridError> {
        self.fields.get(name).ok_or_else(|| GridError::MissingField {
            block: self.id,
            name: name.to_string(),
        })
    }

    pub fn has_field(&self, name: &str) -> bool {
        self.fields.contains_key(name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn fields(&self) -> &BTreeMap<String, SharedField> {
        &self.fields
    }

    pub fn to_local(&self, global: [i64; 3]) -> [isize; 3] {
        [0, 1, 2].map(|d| (global[d] - self.interval.min[d]) as isize)
    }

    pub fn to_global(&self, local: [isize; 3]) -> [i64; 3] {
        [0, 1, 2].map(|d| local[d] as i64 + self.interval.min[d])
    }
}

impl std::ops::Index<&str> for Block {
    type Output = SharedField;

    fn index(&self, name: &str) -> &SharedField {
        &self.fields[name]
    }
}

/// Cuts the domain into candidate blocks and drops those rejected by `keep`.
pub fn decompose_domain(
    global_size: [usize; 3],
    block_size: [usize; 3],
    keep: impl Fn(&CellInterval) -> bool,
) -> Result<Vec<Block>, GridError> {
    if global_size.contains(&0) || block_size.contains(&0) {
        return Err(GridError::ZeroSize {
            global: global_size,
            block: block_size,
        });
    }
    if (0..3).any(|d| global_size[d] % block_size[d] != 0) {
        return Err(GridError::NotDivisible {
            global: global_size,
            block: block_size,
        });
    }
    let grid = [0, 1, 2].map(|d| global_size[d] / block_size[d]);
    let mut blocks = Vec::new();
    for bz in 0..grid[2] {
        for by in 0..grid[1] {
            for bx in 0..grid[0] {
                let coord = [bx, by, bz];
                let min = [0, 1, 2].map(|d| (coord[d] * block_size[d]) as i64);
                let max = [0, 1, 2].map(|d| min[d] + block_size[d] as i64 - 1);
                let interval = CellInterval::new(min, max);
                if keep(&interval) {
                    blocks.push(Block {
                        id: bx + grid[0] * (by + grid[1] * bz),
                        grid_coord: coord,
                        interval,
                        weight: interval.num_cells() as f64,
                        fields: BTreeMap::new(),
                    });
                }
            }
        }
    }
    Ok(blocks)
}

/// Greedy longest-processing-time assignment.
///
/// Blocks are visited by descending weight (ties by ascending id) and each is
/// placed on the currently least loaded worker (ties by lowest worker id).
pub fn assign_blocks(
    blocks: &mut [Block],
    worker_count: usize,
    weight_fn: impl Fn(&Block) -> f64,
) -> Result<BTreeMap<usize, usize>, GridError> {
    if worker_count == 0 {
        return Err(GridError::NoWorkers);
    }
    for b in blocks.iter_mut() {
        b.weight = weight_fn(b);
    }
    let weights: Vec<(usize, f64)> = blocks.iter().map(|b| (b.id, b.weight)).collect();
    Ok(lpt_assign(&weights, worker_count))
}

/// LPT on plain `(id, weight)` pairs.
pub fn lpt_assign(weights: &[(usize, f64)], worker_count: usize) -> BTreeMap<usize, usize> {
    let mut order: Vec<(usize, f64)> = weights.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut loads = vec![0.0f64; worker_count];
    let mut assignment = BTreeMap::new();
    for (id, w) in order {
        let worker = (0..worker_count)
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .unwrap();
        loads[worker] += w;
        assignment.insert(id, worker);
    }
    assignment
}

/// Block metadata, worker assignment and the blocks' fields.
#[derive(Debug, Clone)]
pub struct BlockStorage {
    global_size: [usize; 3],
    block_size: [usize; 3],
    grid: [usize; 3],
    periodic: [bool; 3],
    worker_count: usize,
    blocks: Vec<Block>,
    assignment: BTreeMap<usize, usize>,
    /// Candidate block id to position in `blocks`.
    by_id: BTreeMap<usize, usize>,
}

impl BlockStorage {
    /// Decomposes, filters and balances in one go.
    pub fn new(
        global_size: [usize; 3],
        block_size: [usize; 3],
        periodic: [bool; 3],
        worker_count: usize,
        keep: impl Fn(&CellInterval) -> bool,
        weight_fn: impl Fn(&Block) -> f64,
    ) -> Result<Self, GridError> {
        let mut blocks = decompose_domain(global_size, block_size, keep)?;
        let assignment = assign_blocks(&mut blocks, worker_count, weight_fn)?;
        let by_id = blocks.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        Ok(Self {
            global_size,
            block_size,
            grid: [0, 1, 2].map(|d| global_size[d] / block_size[d]),
            periodic,
            worker_count,
            blocks,
            assignment,
            by_id,
        })
    }

    /// All blocks kept, uniform weights.
    pub fn uniform(
        global_size: [usize; 3],
        block_size: [usize; 3],
        periodic: [bool; 3],
        worker_count: usize,
    ) -> Result<Self, GridError> {
        Self::new(global_size, block_size, periodic, worker_count, |_| true, |b| b.interval().num_cells() as f64)
    }

    /// Global extents, unaffected by discarded blocks.
    pub fn cell_count(&self) -> [usize; 3] {
        self.global_size
    }

    pub fn block_size(&self) -> [usize; 3] {
        self.block_size
    }

    pub fn grid_size(&self) -> [usize; 3] {
        self.grid
    }

    pub fn periodic(&self) -> [bool; 3] {
        self.periodic
    }

    pub fn worker_count(&self) -> usize {
        self.worker_count
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn assignment(&self) -> &BTreeMap<usize, usize> {
        &self.assignment
    }

    pub fn block(&self, id: usize) -> Option<&Block> {
        self.by_id.get(&id).map(|&i| &self.blocks[i])
    }

    pub fn owner(&self, block_id: usize) -> Option<usize> {
        self.assignment.get(&block_id).copied()
    }

    pub fn local_blocks(&self, worker: usize) -> Result<impl Iterator<Item = &Block>, GridError> {
        if worker >= self.worker_count {
            return Err(GridError::UnknownWorker {
                worker,
                count: self.worker_count,
            });
        }
        Ok(self.blocks.iter().filter(move |b| self.assignment[&b.id] == worker))
    }

    /// Block at a (possibly out-of-range) block-grid coordinate, honoring periodicity.
    pub fn block_at_grid(&self, coord: [i64; 3]) -> Option<&Block> {
        let mut c = [0usize; 3];
        for d in 0..3 {
            let n = self.grid[d] as i64;
            let mut v = coord[d];
            if v < 0 || v >= n {
                if !self.periodic[d] {
                    return None;
                }
                v = v.rem_euclid(n);
            }
            c[d] = v as usize;
        }
        let id = c[0] + self.grid[0] * (c[1] + self.grid[1] * c[2]);
        self.block(id)
    }

    /// Face neighbor of `block` along `axis` in direction `dir` (-1 or +1).
    pub fn neighbor(&self, block: &Block, axis: usize, dir: i64) -> Option<&Block> {
        let mut c = block.grid_coord.map(|v| v as i64);
        c[axis] += dir;
        self.block_at_grid(c)
    }

    /// Block containing a global cell, if that block was kept.
    pub fn block_of_cell(&self, cell: [i64; 3]) -> Option<&Block> {
        if (0..3).any(|d| cell[d] < 0 || cell[d] >= self.global_size[d] as i64) {
            return None;
        }
        self.block_at_grid([0, 1, 2].map(|d| cell[d] / self.block_size[d] as i64))
    }

    /// Wraps a global coordinate across periodic axes; `None` if it leaves the domain.
    pub fn wrap_cell(&self, cell: [i64; 3]) -> Option<[i64; 3]> {
        let mut out = cell;
        for d in 0..3 {
            let n = self.global_size[d] as i64;
            if cell[d] < 0 || cell[d] >= n {
                if !self.periodic[d] {
                    return None;
                }
                out[d] = cell[d].rem_euclid(n);
            }
        }
        Some(out)
    }

    /// Allocates a zeroed field of the given shape on every block.
    pub fn add_field(
        &mut self,
        name: &str,
        f_size: usize,
        ghost_layers: usize,
        layout: Layout,
        alignment: usize,
    ) -> Result<(), GridError> {
        for b in &mut self.blocks {
            let s = b.size();
            b.add_field(Field::new(name, [s[0], s[1], s[2], f_size], ghost_layers, layout, alignment)?)?;
        }
        Ok(())
    }

    pub fn total_cells(&self) -> usize {
        self.blocks.iter().map(|b| b.interval.num_cells()).sum()
    }
}
