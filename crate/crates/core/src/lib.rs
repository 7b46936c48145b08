//! Allocation-only core of the tracer-image pipeline.
//!
//! Everything in this crate is a pure function over in-memory grids: flat-field
//! estimation, tile stitching, injection-site localization, classical tracer
//! segmentation, a small U-Net with hand-written backpropagation, displacement
//! field resampling, connectivity tables, and synthetic phantoms with ground
//! truth. File formats, the command line and threading live in the `marmopipe`
//! crate.
#![no_std]
// `!(a > b)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod math;

pub mod error;
pub mod evalsynth;
pub mod filter;
pub mod flatfield;
pub mod image;
pub mod injsite;
pub mod mapping;
pub mod morph;
pub mod nnseg;
pub mod stitch;
pub mod tracerseg;

pub use error::{Error, Result};
pub use image::{Channel, Image2D, Mask2D, Mask3D, SaliencyMap, Stack3D, Tile2D};
