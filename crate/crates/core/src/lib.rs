//! Convex multi-label segmentation on simplicial meshes.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod datacost;
pub mod delaunay;
pub mod energy;
pub mod error;
pub mod extract;
pub mod fem;
pub mod geometry;
pub mod linalg;
pub mod locate;
pub mod mesh;
pub mod pipeline;
pub mod scene;
pub mod shapes;
pub mod snapshot;
pub mod solver;

pub use error::{Error, Result};
