//! Deformable state-space modeling (DSSM) and the DF-Mamba tribrid backbone
//! for 3D hand pose estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape with the
//!   primitives every block needs, plus a finite-difference gradient checker.
//! - [`ssm`]: zero-order-hold discretization, the linear recurrence, its
//!   convolution-kernel dual, selective parameters and the sweep scan order.
//! - [`dssm`]: anchor grids, offset/weight prediction, deformable input
//!   aggregation and the 1D/2D deformable scans.
//! - [`blocks`], [`backbone`]: the Mamba-style blocks, the convolution stem
//!   and the six-stage backbone built from an architecture string.
//! - [`pose`], [`synth`], [`train`]: heatmap head and metrics, procedural
//!   hand data, and the optimizer/training loop with checkpoints.

pub mod backbone;
pub mod blocks;
pub mod dssm;
pub mod error;
pub mod gradsuite;
pub mod nn;
pub mod par;
pub mod pose;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
