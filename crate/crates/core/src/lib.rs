//! Plane fitting on organized depth images.
//!
//! Four least-squares formulations are provided: implicit and explicit fits
//! in Cartesian space, and the same two rewritten in range space
//! `(tan_x, tan_y, 1/Z)`. In range space every depth-independent scatter
//! term is a function of the camera alone, so its integral images are built
//! once per camera instead of once per frame.

pub mod bench;
pub mod camera;
pub mod error;
pub mod fitting;
pub mod grid;
pub mod integral;
pub mod io;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
