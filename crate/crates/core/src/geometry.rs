//! Scenario helpers: domain border tests, a dense sphere packing and a
//! transformed pipe primitive.
//!
//! Cells are addressed by integer global coordinates; a cell covers the unit
//! cube `[i, i + 1)` and its center is `i + 0.5`.

use std::collections::HashMap;

use nalgebra::{Matrix4, Point3, Rotation3, Translation3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("unknown border side '{0}' (expected W E S N B T)")]
    UnknownSide(char),
    #[error("sphere radius {radius} too large for a {extent:?} domain")]
    RadiusTooLarge { radius: f64, extent: [usize; 3] },
    #[error("sphere radius {0} below 2 cells")]
    RadiusTooSmall(f64),
    #[error("pipe diameter and length must be positive")]
    BadPipe,
    #[error("unknown rotation axis '{0}'")]
    UnknownAxis(String),
}

pub type GeometryResult<T> = Result<T, GeometryError>;

/// True if the cell lies on any of the named global faces: W/E are the x
/// faces, S/N the y faces, B/T the z faces.
pub fn is_at_border(cell: [i64; 3], size: [usize; 3], sides: &str) -> GeometryResult<bool> {
    let mut hit = false;
    for c in sides.chars() {
        let (axis, high) = match c.to_ascii_uppercase() {
            'W' => (0, false),
            'E' => (0, true),
            'S' => (1, false),
            'N' => (1, true),
            'B' => (2, false),
            'T' => (2, true),
            _ => return Err(GeometryError::UnknownSide(c)),
        };
        let edge = if high { size[axis] as i64 - 1 } else { 0 };
        hit |= cell[axis] == edge;
    }
    Ok(hit)
}

/// Radius used when a script calls `sphere_pack(nx, ny, nz)`.
pub const DEFAULT_SPHERE_RADIUS: f64 = 8.0;
/// Liquid gap between neighboring spheres and between spheres and the domain border.
pub const SPHERE_GAP: f64 = 2.0;

const SUBSAMPLES: usize = 4;

/// Equal spheres on a hexagonal close packed lattice filling the domain.
#[derive(Debug, Clone)]
pub struct SpherePack {
    pub extent: [usize; 3],
    pub radius: f64,
    pub centers: Vec<[f64; 3]>,
    bucket: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl SpherePack {
    pub fn new(extent: [usize; 3], radius: f64) -> GeometryResult<Self> {
        if !(radius >= 2.0) {
            return Err(GeometryError::RadiusTooSmall(radius));
        }
        let d = 2.0 * radius + SPHERE_GAP;
        let lo = radius + SPHERE_GAP / 2.0;
        let hi = extent.map(|n| n as f64 - lo);
        if hi.iter().any(|&h| h < lo) {
            return Err(GeometryError::RadiusTooLarge { radius, extent });
        }
        let (dy, dz) = (d * 3f64.sqrt() / 2.0, d * (2.0f64 / 3.0).sqrt());
        let mut centers = Vec::new();
        let mut k = 0;
        loop {
            let z = lo + k as f64 * dz;
            if z > hi[2] {
                break;
            }
            // B layers sit over the triangle centers of the A layer
            let (ox, oy) = if k % 2 == 1 { (d / 2.0, d * 3f64.sqrt() / 6.0) } else { (0.0, 0.0) };
            let mut j = 0;
            loop {
                let y = lo + oy + j as f64 * dy;
                if y > hi[1] {
                    break;
                }
                let sx = if j % 2 == 1 { d / 2.0 } else { 0.0 };
                let mut i = 0;
                loop {
                    let x = lo + ox + sx + i as f64 * d;
                    if x > hi[0] {
                        break;
                    }
                    centers.push([x, y, z]);
                    i += 1;
                }
                j += 1;
            }
            k += 1;
        }
        let bucket = d;
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, c) in centers.iter().enumerate() {
            buckets.entry(c.map(|v| (v / bucket).floor() as i64)).or_default().push(i);
        }
        Ok(Self {
            extent,
            radius,
            centers,
            bucket,
            buckets,
        })
    }

    fn near(&self, p: [f64; 3]) -> impl Iterator<Item = &[f64; 3]> + '_ {
        let b = p.map(|v| (v / self.bucket).floor() as i64);
        (-1..=1)
            .flat_map(move |dz| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dx| [b[0] + dx, b[1] + dy, b[2] + dz])))
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .map(|&i| &self.centers[i])
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        let r2 = self.radius * self.radius;
        self.near(p).any(|c| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>() <= r2)
    }

    /// Fraction of the cell cube inside any sphere, from 4x4x4 subsamples.
    pub fn overlap(&self, cell: [i64; 3]) -> f64 {
        overlap_with(cell, SUBSAMPLES, |p| self.contains_point(p))
    }
}

/// Fraction of an `n^3` midpoint subsampling of the cell cube for which `inside` holds.
pub fn overlap_with(cell: [i64; 3], n: usize, inside: impl Fn([f64; 3]) -> bool) -> f64 {
    let h = 1.0 / n as f64;
    let mut hits = 0;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let p = [
                    cell[0] as f64 + (i as f64 + 0.5) * h,
                    cell[1] as f64 + (j as f64 + 0.5) * h,
                    cell[2] as f64 + (k as f64 + 0.5) * h,
                ];
                if inside(p) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / (n * n * n) as f64
}

pub fn sphere_pack(nx: usize, ny: usize, nz: usize, radius: f64) -> GeometryResult<SpherePack> {
    SpherePack::new([nx, ny, nz], radius)
}

/// Cylinder along the object x axis from 0 to `length`, placed in the world
/// by an affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipe {
    pub diameter: f64,
    pub length: f64,
    pub shell_thickness: f64,
    pub world_to_object: Matrix4<f64>,
}

fn axis_vector(axis: &str) -> GeometryResult<Vector3<f64>> {
    match axis {
        "x" | "X" => Ok(Vector3::x()),
        "y" | "Y" => Ok(Vector3::y()),
        "z" | "Z" => Ok(Vector3::z()),
        other => Err(GeometryError::UnknownAxis(other.into())),
    }
}

impl Pipe {
    /// Pipe starting at `position` (world coordinates) and pointing along +x.
    pub fn new(diameter: f64, length: f64, position: [f64; 3]) -> GeometryResult<Self> {
        if !(diameter > 0.0 && length > 0.0) {
            return Err(GeometryError::BadPipe);
        }
        let t = Translation3::new(position[0], position[1], position[2]);
        Ok(Self {
            diameter,
            length,
            shell_thickness: 1.0,
            world_to_object: t.inverse().to_homogeneous(),
        })
    }

    pub fn object_to_world(&self) -> Matrix4<f64> {
        self.world_to_object.try_inverse().expect("pipe transform is invertible")
    }

    /// Rotates the pipe about its start point by `degrees` around a world axis.
    pub fn rotate(&mut self, degrees: f64, axis: &str) -> GeometryResult<()> {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis_vector(axis)?), degrees.to_radians());
        let o2w = self.object_to_world();
        let origin = o2w.transform_point(&Point3::origin());
        let to = Translation3::from(origin.coords).to_homogeneous();
        let back = Translation3::from(-origin.coords).to_homogeneous();
        let new = to * rot.to_homogeneous() * back * o2w;
        self.world_to_object = new.try_inverse().expect("rotation keeps the transform invertible");
        Ok(())
    }

    /// Object coordinates `(axial, radial)` of a world point.
    pub fn local(&self, p: [f64; 3]) -> (f64, f64) {
        let o = self.world_to_object.transform_point(&Point3::new(p[0], p[1], p[2]));
        (o.x, (o.y * o.y + o.z * o.z).sqrt())
    }

    fn cell_local(&self, cell: [i64; 3]) -> (f64, f64) {
        self.local(cell.map(|v| v as f64 + 0.5))
    }

    pub fn contains(&self, cell: [i64; 3]) -> bool {
        let (a, r) = self.cell_local(cell);
        (0.0..=self.length).contains(&a) && r < self.diameter / 2.0
    }

    pub fn shell_contains(&self, cell: [i64; 3]) -> bool {
        let (a, r) = self.cell_local(cell);
        let r0 = self.diameter / 2.0;
        (0.0..=self.length).contains(&a) && r >= r0 && r < r0 + self.shell_thickness
    }

    /// World direction of the pipe axis.
    pub fn axis(&self) -> [f64; 3] {
        let v = self.object_to_world().transform_vector(&Vector3::x()).normalize();
        [v.x, v.y, v.z]
    }

    /// Poiseuille profile `max_vel (1 - (2r/D)^2)` along the axis, zero outside the bore.
    pub fn parabolic_vel(&self, cell: [i64; 3], max_vel: f64) -> [f64; 3] {
        let (_, r) = self.cell_local(cell);
        let s = max_vel * (1.0 - (2.0 * r / self.diameter).powi(2)).max(0.0);
        self.axis().map(|a| a * s)
    }
}
