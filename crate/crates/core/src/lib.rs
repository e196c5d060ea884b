//! Smoothness-constrained differentiable dynamic programming for segmenting
//! terrain-like surfaces in 2D scans.
//!
//! Each surface crosses every image column exactly once, and adjacent
//! columns may differ by at most `Δ` rows. The exact optimum is a dynamic
//! program ([`dynprog`]); replacing its max by a LogSumExp gives a recursion
//! that is differentiable in the costs ([`softdp`], [`gradients`]), so the
//! solver can sit inside a gradient-trained pipeline ([`fit`]).

pub mod costmodel;
mod dd;
pub mod driver;
pub mod dynprog;
pub mod error;
pub mod evalloss;
pub mod fit;
pub mod gradients;
pub mod grid;
pub mod imageio;
pub mod phantom;
pub mod softdp;

pub use error::{Error, Result};
pub use grid::{Grid3, SurfaceSet, Surfaces};
