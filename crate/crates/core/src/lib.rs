//! Block-structured lattice Boltzmann core: fields, block decomposition,
//! communication, the stream/collide kernels and the free-surface extension.

pub mod blockgrid;
pub mod comms;
pub mod field;
pub mod lbm;
pub mod freesurface;
pub mod unitsconfig;
pub mod geometry;
