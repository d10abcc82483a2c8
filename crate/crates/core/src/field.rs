//! Four-dimensional cell-data container.
//!
//! A [`Field`] stores `f` values per cell of a three-dimensional box that is
//! surrounded by `g` ghost layers. Spatial coordinates are signed: interior
//! cells live in `[0, n)`, ghost cells in `[-g, 0)` and `[n, n + g)`, so interior
//! coordinates do not shift when the ghost-layer count changes.
//!
//! Two memory layouts are supported:
//!
//! * [`Layout::AoS`]: all values of one cell are contiguous (`f` innermost).
//! * [`Layout::SoA`]: one contiguous 3D array per component (`x` innermost).
//!
//! In SoA layout the innermost spatial extent is padded so that every x-line
//! starts on an `alignment`-byte boundary. The buffer base is allocated with the
//! same alignment.

use std::ops::Range;
use std::sync::Arc;

use aligned_vec::{AVec, RuntimeAlign};
use parking_lot::RwLock;
use thiserror::Error;

const ELEMENT_BYTES: usize = std::mem::size_of::<f64>();

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("field extent {axis} must be at least 1")]
    ZeroExtent { axis: usize },
    #[error("alignment {0} is not a power of two >= 8")]
    BadAlignment(usize),
    #[error("coordinate ({x}, {y}, {z}, {f}) outside field {name}")]
    OutOfRange {
        name: String,
        x: isize,
        y: isize,
        z: isize,
        f: isize,
    },
    #[error("slice interval {0:?} is empty or out of range")]
    BadInterval([Range<isize>; 4]),
    #[error("cannot swap {a} and {b}: shape, ghost layers, layout or alignment differ")]
    ShapeMismatch { a: String, b: String },
    #[error("array view is read-only")]
    ReadOnly,
}

/// Memory layout of the value dimension relative to the spatial dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Layout {
    #[default]
    AoS,
    SoA,
}

/// Field shared between the owning worker and the views exported from it.
pub type SharedField = Arc<RwLock<Field>>;

pub struct Field {
    name: String,
    requested: [usize; 4],
    allocated: [usize; 4],
    ghost: usize,
    layout: Layout,
    alignment: usize,
    /// Element strides for x, y, z and f.
    strides: [usize; 4],
    data: AVec<f64, RuntimeAlign>,
}

impl std::fmt::Debug for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Field")
            .field("name", &self.name)
            .field("requested", &self.requested)
            .field("allocated", &self.allocated)
            .field("ghost", &self.ghost)
            .field("layout", &self.layout)
            .field("alignment", &self.alignment)
            .finish()
    }
}

impl Clone for Field {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            requested: self.requested,
            allocated: self.allocated,
            ghost: self.ghost,
            layout: self.layout,
            alignment: self.alignment,
            strides: self.strides,
            data: self.data.clone(),
        }
    }
}

impl Field {
    /// Allocates a zero-initialised field.
    pub fn new(
        name: impl Into<String>,
        requested: [usize; 4],
        ghost: usize,
        layout: Layout,
        alignment: usize,
    ) -> Result<Self, FieldError> {
        if let Some(axis) = requested.iter().position(|&n| n == 0) {
            return Err(FieldError::ZeroExtent { axis });
        }
        if alignment < ELEMENT_BYTES || !alignment.is_power_of_two() {
            return Err(FieldError::BadAlignment(alignment));
        }
        let mut allocated = [
            requested[0] + 2 * ghost,
            requested[1] + 2 * ghost,
            requested[2] + 2 * ghost,
            requested[3],
        ];
        if layout == Layout::SoA {
            let per_line = alignment / ELEMENT_BYTES;
            allocated[0] = allocated[0].div_ceil(per_line) * per_line;
        }
        let [ax, ay, az, af] = allocated;
        let strides = match layout {
            Layout::AoS => [af, ax * af, ax * ay * af, 1],
            Layout::SoA => [1, ax, ax * ay, ax * ay * az],
        };
        let len = allocated.iter().product();
        let mut data = AVec::new(alignment);
        data.resize(len, 0.0);
        Ok(Self {
            name: name.into(),
            requested,
            allocated,
            ghost,
            layout,
            alignment,
            strides,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn requested_size(&self) -> [usize; 4] {
        self.requested
    }

    pub fn allocated_size(&self) -> [usize; 4] {
        self.allocated
    }

    /// Spatial interior extents `(nx, ny, nz)`.
    pub fn spatial_size(&self) -> [usize; 3] {
        [self.requested[0], self.requested[1], self.requested[2]]
    }

    pub fn f_size(&self) -> usize {
        self.requested[3]
    }

    pub fn ghost_layers(&self) -> usize {
        self.ghost
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn alignment(&self) -> usize {
        self.alignment
    }

    /// Element strides of the x, y, z and f coordinates.
    pub fn strides(&self) -> [usize; 4] {
        self.strides
    }

    pub fn data(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.data.as_mut_slice()
    }

    pub fn into_shared(self) -> SharedField {
        Arc::new(RwLock::new(self))
    }

    fn in_range(&self, x: isize, y: isize, z: isize, f: isize) -> bool {
        let g = self.ghost as isize;
        let inside = |c: isize, n: usize| c >= -g && c < n as isize + g;
        inside(x, self.requested[0])
            && inside(y, self.requested[1])
            && inside(z, self.requested[2])
            && f >= 0
            && (f as usize) < self.requested[3]
    }

    /// Buffer offset of `(x, y, z, f)`, checked against the ghost-inclusive extents.
    pub fn element_index(&self, x: isize, y: isize, z: isize, f: isize) -> Result<usize, FieldError> {
        if !self.in_range(x, y, z, f) {
            return Err(FieldError::OutOfRange {
                name: self.name.clone(),
                x,
                y,
                z,
                f,
            });
        }
        Ok(self.index(x, y, z, f as usize))
    }

    /// Unchecked variant of [`Field::element_index`] for kernels.
    #[inline(always)]
    pub fn index(&self, x: isize, y: isize, z: isize, f: usize) -> usize {
        debug_assert!(self.in_range(x, y, z, f as isize), "({x},{y},{z},{f}) outside {}", self.name);
        let g = self.ghost as isize;
        let [sx, sy, sz, sf] = self.strides;
        (x + g) as usize * sx + (y + g) as usize * sy + (z + g) as usize * sz + f * sf
    }

    /// Offset of component 0 of a cell.
    #[inline(always)]
    pub fn cell_index(&self, x: isize, y: isize, z: isize) -> usize {
        self.index(x, y, z, 0)
    }

    #[inline(always)]
    pub fn get(&self, x: isize, y: isize, z: isize, f: usize) -> f64 {
        self.data[self.index(x, y, z, f)]
    }

    #[inline(always)]
    pub fn set(&mut self, x: isize, y: isize, z: isize, f: usize, value: f64) {
        let i = self.index(x, y, z, f);
        self.data[i] = value;
    }

    /// Sets every element, ghost layers and padding included.
    pub fn fill(&mut self, value: f64) {
        self.data.as_mut_slice().fill(value);
    }

    /// Interior cell coordinates in z-major (x fastest) order.
    pub fn interior_cells(&self) -> impl Iterator<Item = [isize; 3]> {
        cells_in(
            [0, 0, 0],
            [self.requested[0] as isize, self.requested[1] as isize, self.requested[2] as isize],
        )
    }

    /// Ghost-inclusive cell coordinates in z-major order.
    pub fn all_cells(&self) -> impl Iterator<Item = [isize; 3]> {
        let g = self.ghost as isize;
        cells_in(
            [-g, -g, -g],
            [
                self.requested[0] as isize + g,
                self.requested[1] as isize + g,
                self.requested[2] as isize + g,
            ],
        )
    }

    /// True when both fields can exchange buffers.
    pub fn same_shape(&self, other: &Field) -> bool {
        self.requested == other.requested
            && self.ghost == other.ghost
            && self.layout == other.layout
            && self.alignment == other.alignment
    }

    /// Exchanges the underlying buffers in O(1).
    pub fn swap_buffers(&mut self, other: &mut Field) -> Result<(), FieldError> {
        if !self.same_shape(other) {
            return Err(FieldError::ShapeMismatch {
                a: self.name.clone(),
                b: other.name.clone(),
            });
        }
        std::mem::swap(&mut self.data, &mut other.data);
        Ok(())
    }

    fn check_interval(&self, interval: &[Range<isize>; 4], ghosts: bool) -> Result<(), FieldError> {
        let g = if ghosts { self.ghost as isize } else { 0 };
        let ok = (0..4).all(|d| {
            let (lo, hi) = if d < 3 {
                (-g, self.requested[d] as isize + g)
            } else {
                (0, self.requested[3] as isize)
            };
            let r = &interval[d];
            r.start < r.end && r.start >= lo && r.end <= hi
        });
        if ok {
            Ok(())
        } else {
            Err(FieldError::BadInterval(interval.clone()))
        }
    }

    /// Read-only view onto an interior sub-box.
    pub fn view_slice(&self, interval: [Range<isize>; 4]) -> Result<FieldView<'_>, FieldError> {
        self.check_interval(&interval, false)?;
        Ok(self.make_view(interval))
    }

    /// Like [`Field::view_slice`] but the interval may reach into the ghost layers.
    pub fn view_slice_with_ghosts(&self, interval: [Range<isize>; 4]) -> Result<FieldView<'_>, FieldError> {
        self.check_interval(&interval, true)?;
        Ok(self.make_view(interval))
    }

    pub fn view_slice_mut(&mut self, interval: [Range<isize>; 4]) -> Result<FieldViewMut<'_>, FieldError> {
        self.check_interval(&interval, false)?;
        let (offset, size) = self.view_geometry(&interval);
        let strides = self.strides;
        Ok(FieldViewMut {
            data: self.data.as_mut_slice(),
            offset,
            size,
            strides,
        })
    }

    fn view_geometry(&self, interval: &[Range<isize>; 4]) -> (usize, [usize; 4]) {
        let offset = self.index(
            interval[0].start,
            interval[1].start,
            interval[2].start,
            interval[3].start as usize,
        );
        let size = [0, 1, 2, 3].map(|d| (interval[d].end - interval[d].start) as usize);
        (offset, size)
    }

    fn make_view(&self, interval: [Range<isize>; 4]) -> FieldView<'_> {
        let (offset, size) = self.view_geometry(&interval);
        FieldView {
            data: self.data.as_slice(),
            offset,
            size,
            strides: self.strides,
        }
    }

    /// The full interior as a view.
    pub fn interior_view(&self) -> FieldView<'_> {
        self.make_view(self.full_interval())
    }

    pub fn full_interval(&self) -> [Range<isize>; 4] {
        [
            0..self.requested[0] as isize,
            0..self.requested[1] as isize,
            0..self.requested[2] as isize,
            0..self.requested[3] as isize,
        ]
    }

    /// Buffer-protocol style descriptor of the interior cells.
    pub fn export_array_view(&self, writable: bool) -> ArrayViewDescriptor {
        self.interior_view().export_array_view(writable)
    }

    /// Descriptor for an arbitrary sub-box (interior coordinates).
    pub fn export_slice(&self, interval: [Range<isize>; 4], writable: bool) -> Result<ArrayViewDescriptor, FieldError> {
        Ok(self.view_slice(interval)?.export_array_view(writable))
    }
}

fn cells_in(lo: [isize; 3], hi: [isize; 3]) -> impl Iterator<Item = [isize; 3]> {
    (lo[2]..hi[2]).flat_map(move |z| (lo[1]..hi[1]).flat_map(move |y| (lo[0]..hi[0]).map(move |x| [x, y, z])))
}

/// Read-only sub-box of a field. Shares the parent's strides.
#[derive(Clone, Copy)]
pub struct FieldView<'a> {
    data: &'a [f64],
    offset: usize,
    size: [usize; 4],
    strides: [usize; 4],
}

impl FieldView<'_> {
    pub fn size(&self) -> [usize; 4] {
        self.size
    }

    pub fn strides(&self) -> [usize; 4] {
        self.strides
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        assert!(i < self.size[0] && j < self.size[1] && k < self.size[2] && l < self.size[3]);
        let [sx, sy, sz, sf] = self.strides;
        self.data[self.offset + i * sx + j * sy + k * sz + l * sf]
    }

    pub fn export_array_view(&self, writable: bool) -> ArrayViewDescriptor {
        ArrayViewDescriptor {
            base_offset: self.offset * ELEMENT_BYTES,
            shape: self.size,
            strides_bytes: self.strides.map(|s| s * ELEMENT_BYTES),
            element_kind: ElementKind::Float64,
            writable,
        }
    }
}

/// Mutable sub-box of a field.
pub struct FieldViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    size: [usize; 4],
    strides: [usize; 4],
}

impl FieldViewMut<'_> {
    pub fn size(&self) -> [usize; 4] {
        self.size
    }

    fn at(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        assert!(i < self.size[0] && j < self.size[1] && k < self.size[2] && l < self.size[3]);
        let [sx, sy, sz, sf] = self.strides;
        self.offset + i * sx + j * sy + k * sz + l * sf
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.at(i, j, k, l)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, value: f64) {
        let idx = self.at(i, j, k, l);
        self.data[idx] = value;
    }

    pub fn export_array_view(&self, writable: bool) -> ArrayViewDescriptor {
        FieldView {
            data: self.data,
            offset: self.offset,
            size: self.size,
            strides: self.strides,
        }
        .export_array_view(writable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Float64,
}

/// Describes how a 4D array is laid out inside a field buffer, in the spirit
/// of a strided buffer protocol. It never owns cell data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayViewDescriptor {
    /// Byte offset of element `[0, 0, 0, 0]` from the start of the buffer.
    pub base_offset: usize,
    pub shape: [usize; 4],
    pub strides_bytes: [usize; 4],
    pub element_kind: ElementKind,
    pub writable: bool,
}

impl ArrayViewDescriptor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element (not byte) offset of a view index, `None` when out of shape.
    pub fn element_offset(&self, idx: [usize; 4]) -> Option<usize> {
        if (0..4).any(|d| idx[d] >= self.shape[d]) {
            return None;
        }
        let bytes = self.base_offset + (0..4).map(|d| idx[d] * self.strides_bytes[d]).sum::<usize>();
        Some(bytes / ELEMENT_BYTES)
    }

    pub fn read(&self, buffer: &[f64], idx: [usize; 4]) -> Option<f64> {
        self.element_offset(idx).and_then(|o| buffer.get(o).copied())
    }

    pub fn write(&self, buffer: &mut [f64], idx: [usize; 4], value: f64) -> Result<(), FieldError> {
        if !self.writable {
            return Err(FieldError::ReadOnly);
        }
        let offset = self.element_offset(idx).ok_or(FieldError::ReadOnly)?;
        buffer[offset] = value;
        Ok(())
    }

    /// Restricts the last coordinate to a single component.
    pub fn component(&self, f: usize) -> Option<ArrayViewDescriptor> {
        if f >= self.shape[3] {
            return None;
        }
        let mut d = self.clone();
        d.base_offset += f * self.strides_bytes[3];
        d.shape[3] = 1;
        Some(d)
    }

    /// All view indices in row-major order (last coordinate fastest).
    pub fn indices(&self) -> impl Iterator<Item = [usize; 4]> + '_ {
        let [a, b, c, d] = self.shape;
        (0..a).flat_map(move |i| (0..b).flat_map(move |j| (0..c).flat_map(move |k| (0..d).map(move |l| [i, j, k, l]))))
    }
}

/// Live, zero-copy handle pairing a shared field with a descriptor.
///
/// The handle refers to the field, not to a particular allocation, so after a
/// buffer swap it observes the data the field now holds.
#[derive(Clone)]
pub struct SharedArrayView {
    field: SharedField,
    desc: ArrayViewDescriptor,
}

impl std::fmt::Debug for SharedArrayView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedArrayView").field("desc", &self.desc).finish()
    }
}

impl SharedArrayView {
    pub fn new(field: SharedField, writable: bool) -> Self {
        let desc = field.read().export_array_view(writable);
        Self { field, desc }
    }

    pub fn from_descriptor(field: SharedField, desc: ArrayViewDescriptor) -> Self {
        Self { field, desc }
    }

    pub fn descriptor(&self) -> &ArrayViewDescriptor {
        &self.desc
    }

    pub fn field(&self) -> &SharedField {
        &self.field
    }

    pub fn shape(&self) -> [usize; 4] {
        self.desc.shape
    }

    pub fn get(&self, idx: [usize; 4]) -> Option<f64> {
        self.desc.read(self.field.read().data(), idx)
    }

    pub fn set(&self, idx: [usize; 4], value: f64) -> Result<(), FieldError> {
        if !self.desc.writable {
            return Err(FieldError::ReadOnly);
        }
        if self.desc.element_offset(idx).is_none() {
            return Err(FieldError::BadInterval(
                [0, 1, 2, 3].map(|d| idx[d] as isize..idx[d] as isize + 1),
            ));
        }
        self.desc.write(self.field.write().data_mut(), idx, value)
    }

    pub fn component(&self, f: usize) -> Option<Self> {
        Some(Self {
            field: self.field.clone(),
            desc: self.desc.component(f)?,
        })
    }

    pub fn read_only(&self) -> Self {
        let mut desc = self.desc.clone();
        desc.writable = false;
        Self {
            field: self.field.clone(),
            desc,
        }
    }

    /// Folds over all viewed elements in row-major order.
    pub fn fold<T>(&self, init: T, mut op: impl FnMut(T, f64) -> T) -> T {
        let guard = self.field.read();
        let data = guard.data();
        self.desc
            .indices()
            .fold(init, |acc, idx| op(acc, data[self.desc.element_offset(idx).unwrap()]))
    }

    pub fn max(&self) -> f64 {
        self.fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.fold(0.0, |a, v| a + v)
    }

    pub fn fill(&self, value: f64) -> Result<(), FieldError> {
        if !self.desc.writable {
            return Err(FieldError::ReadOnly);
        }
        let mut guard = self.field.write();
        let data = guard.data_mut();
        for idx in self.desc.indices() {
            data[self.desc.element_offset(idx).unwrap()] = value;
        }
        Ok(())
    }

    /// Copies the viewed values out in row-major order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.fold(Vec::with_capacity(self.desc.len()), |mut v, x| {
            v.push(x);
            v
        })
    }
}
