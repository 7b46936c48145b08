//! Whole-slice inference by tiling the valid output region.
//!
//! The slice is mirror-padded by the network margin on the top-left and as
//! far as needed on the bottom-right. Tile inputs start at multiples of the
//! stride, which is a multiple of the total pooling factor, so every tile
//! sees the same pooling phase as a single pass over the padded slice would;
//! the stitched map is therefore identical to whole-image inference.

use alloc::vec::Vec;

use super::tensor::TensorGrid;
use super::unet::NetworkParams;
use crate::error::{Error, Result};
use crate::filter::reflect_index;
use crate::image::{Image2D, SaliencyMap};

/// Tiling of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingPlan {
    pub width: usize,
    pub height: usize,
    pub input_extent: usize,
    pub output_extent: usize,
    pub margin: usize,
    pub stride: usize,
    /// Top-left output pixel of every tile, row-major.
    pub tiles: Vec<(usize, usize)>,
}

impl SlidingPlan {
    pub fn new(params: &NetworkParams, width: usize, height: usize, input_extent: usize) -> Result<Self> {
        let cfg = &params.config;
        let out = cfg.output_extent(input_extent)?;
        let margin = (input_extent - out) / 2;
        let pool = 1usize << (cfg.depth - 1);
        let stride = out - out % pool;
        if stride == 0 {
            return Err(Error::param("input_extent", "valid output is smaller than the pooling factor"));
        }
        if width == 0 || height == 0 {
            return Err(Error::param("slice", "empty"));
        }
        let nx = width.div_ceil(stride);
        let ny = height.div_ceil(stride);
        let mut tiles = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                tiles.push((i * stride, j * stride));
            }
        }
        Ok(SlidingPlan {
            width,
            height,
            input_extent,
            output_extent: out,
            margin,
            stride,
            tiles,
        })
    }

    /// Extent of the padded canvas covering all tile inputs.
    pub fn padded_extent(&self) -> (usize, usize) {
        let (lx, ly) = self.tiles.last().copied().unwrap_or((0, 0));
        (lx + self.input_extent, ly + self.input_extent)
    }

    /// Mirror-padded canvas; pixel `(u, v)` holds slice pixel
    /// `(u - margin, v - margin)` reflected into range.
    pub fn pad(&self, channels: &[&Image2D]) -> Result<TensorGrid> {
        let first = channels.first().ok_or(Error::Empty("channels"))?;
        if channels.iter().any(|c| c.dims() != (self.width, self.height)) {
            return Err(Error::shape((self.width, self.height), first.dims()));
        }
        let (pw, ph) = self.padded_extent();
        let m = self.margin as isize;
        let mut out = TensorGrid::zeros(channels.len(), ph, pw);
        for (c, img) in channels.iter().enumerate() {
            let dst = out.channel_mut(c);
            for v in 0..ph {
                let sy = reflect_index(v as isize - m, self.height);
                for u in 0..pw {
                    let sx = reflect_index(u as isize - m, self.width);
                    dst[u + pw * v] = img.get(sx, sy);
                }
            }
        }
        Ok(out)
    }

    /// Input window of one tile.
    pub fn tile_input(&self, padded: &TensorGrid, tile: (usize, usize)) -> Result<TensorGrid> {
        padded.crop(tile.1, tile.0, self.input_extent, self.input_extent)
    }

    /// Write tile outputs (in plan order) into a slice-sized map.
    pub fn assemble(&self, outputs: &[TensorGrid]) -> Result<SaliencyMap> {
        if outputs.len() != self.tiles.len() {
            return Err(Error::shape(self.tiles.len(), outputs.len()));
        }
        let mut img = Image2D::zeros(self.width, self.height);
        for (&(x0, y0), o) in self.tiles.iter().zip(outputs) {
            if o.shape() != (1, self.output_extent, self.output_extent) {
                return Err(Error::shape((1, self.output_extent, self.output_extent), o.shape()));
            }
            for y in 0..self.output_extent.min(self.height - y0) {
                for x in 0..self.output_extent.min(self.width - x0) {
                    img.set(x0 + x, y0 + y, o.get(0, y, x));
                }
            }
        }
        SaliencyMap::new(img)
    }
}

/// Saliency over the full slice; serial over tiles.
pub fn sliding_window_predict(
    params: &NetworkParams,
    channels: &[&Image2D],
    input_extent: usize,
) -> Result<SaliencyMap> {
    let first = channels.first().ok_or(Error::Empty("channels"))?;
    let plan = SlidingPlan::new(params, first.width(), first.height(), input_extent)?;
    let padded = plan.pad(channels)?;
    let mut outputs = Vec::with_capacity(plan.tiles.len());
    for &t in &plan.tiles {
        outputs.push(params.predict(&plan.tile_input(&padded, t)?)?);
    }
    plan.assemble(&outputs)
}
