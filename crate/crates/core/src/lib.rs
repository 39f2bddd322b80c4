//! Mask-aware state-space scanning for shadow removal.
//!
//! This crate holds the pure algorithmic pieces: a small reverse-mode
//! autodiff tape over dense `f64` tensors, patch classification of shadow
//! masks, deterministic scan-order generation (horizontal and mask-aware
//! spiral/greedy orders), discretized selective state-space kernels, the
//! network blocks built from them, a toy trainer and image quality metrics.
//!
//! It is `no_std` and only needs `alloc`. File formats, image I/O and the
//! command-line tool live in the `umbra` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod blocks;
pub mod color;
mod error;
pub mod kernels;
pub mod mask;
mod math;
pub mod metrics;
pub mod net;
pub mod params;
pub mod scan;
pub mod ssm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use mask::{MaskImage, PatchGrid, PatchLabel, RegionRect};
pub use params::{ParamId, ParamStore};
pub use scan::{Coord, ScanKind, ScanPath};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
