//! Image containers shared by every stage.
//!
//! All grids are stored row-major with x fastest: index = x + width * y
//! (+ width * height * z for volumes). Intensities are kept as `f64`
//! internally regardless of the 16-bit storage format on disk.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Default in-plane pixel pitch of the full-resolution tiles, in µm.
pub const DEFAULT_PIXEL_PITCH_UM: f64 = 1.34;
/// Section spacing, in µm.
pub const SECTION_SPACING_UM: f64 = 50.0;

/// Fluorescence channel of a tile or stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    /// Red: autofluorescence background.
    Red,
    /// Green: anterograde tracer plus autofluorescence.
    Green,
    /// Blue: injection-site cell bodies.
    Blue,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Red, Channel::Green, Channel::Blue];

    pub fn tag(self) -> &'static str {
        match self {
            Channel::Red => "CR",
            Channel::Green => "CG",
            Channel::Blue => "CB",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "CR" => Ok(Channel::Red),
            "CG" => Ok(Channel::Green),
            "CB" => Ok(Channel::Blue),
            other => Err(Error::InvalidData(alloc::format!(
                "unknown channel tag {other:?}"
            ))),
        }
    }
}

/// One 16-bit microscope tile with its stage coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile2D {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
    pub channel: Channel,
    /// Stage position of the tile's top-left pixel, in µm.
    pub world_offset: [f64; 3],
    pub tile_index: u32,
    /// µm per pixel.
    pub pixel_pitch: f64,
}

impl Tile2D {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u16>,
        channel: Channel,
        world_offset: [f64; 3],
        tile_index: u32,
        pixel_pitch: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("tile extent", "width and height must be > 0"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(width * height, pixels.len()));
        }
        if !(pixel_pitch > 0.0) || !pixel_pitch.is_finite() {
            return Err(Error::param("pixel_pitch", "must be a positive number"));
        }
        Ok(Tile2D {
            width,
            height,
            pixels,
            channel,
            world_offset,
            tile_index,
            pixel_pitch,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[x + self.width * y]
    }

    /// Real-valued copy of the pixel grid.
    pub fn to_image(&self) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Same metadata, new pixels. Values are rounded half away from zero and
    /// clamped to `[0, 65535]`.
    pub fn with_image(&self, image: &Image2D) -> Result<Tile2D> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::shape(
                (self.width, self.height),
                (image.width(), image.height()),
            ));
        }
        Ok(Tile2D {
            pixels: image.data().iter().map(|&v| quantize_u16(v)).collect(),
            ..self.clone()
        })
    }
}

/// Round half away from zero and clamp to the 16-bit range. NaN maps to 0.
pub fn quantize_u16(v: f64) -> u16 {
    if !(v > 0.0) {
        return 0;
    }
    let r = crate::math::round(v);
    if r >= 65535.0 {
        65535
    } else {
        r as u16
    }
}

/// Real-valued 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image2D {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        Ok(Image2D {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image2D {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[x + self.width * y] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the rectangle `[x0, x0 + w) × [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image2D> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::param("crop", "rectangle exceeds image extent"));
        }
        Ok(Image2D::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    pub(crate) fn same_shape(&self, other: &Image2D) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        Ok(())
    }
}

/// Binary 2D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask2D {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask2D {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        Ok(Mask2D {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask2D {
            width,
            height,
            data,
        }
    }

    /// Pixels of `image` strictly above `threshold`.
    pub fn threshold(image: &Image2D, threshold: f64) -> Self {
        Mask2D {
            width: image.width(),
            height: image.height(),
            data: image.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[x + self.width * y] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask2D) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_image(&self) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Mask2D> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::param("crop", "rectangle exceeds mask extent"));
        }
        Ok(Mask2D::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }
}

/// Real-valued 3D volume with physical voxel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack3D {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    pub channel: Option<Channel>,
    data: Vec<f64>,
}

impl Stack3D {
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        channel: Option<Channel>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::param("dims", "all dimensions must be > 0"));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::param("voxel_size", "all voxel sizes must be > 0"));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(dims[0] * dims[1] * dims[2], data.len()));
        }
        Ok(Stack3D {
            dims,
            voxel_size,
            channel,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, None, vec![0.0; dims[0] * dims[1] * dims[2]])
    }

    /// Stack whose z-slice `k` is `slices[k]`.
    pub fn from_slices(
        slices: &[Image2D],
        voxel_size: [f64; 3],
        channel: Option<Channel>,
    ) -> Result<Self> {
        let first = slices.first().ok_or(Error::Empty("slices"))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(w * h * slices.len());
        for s in slices {
            if s.dims() != (w, h) {
                return Err(Error::shape((w, h), s.dims()));
            }
            data.extend_from_slice(s.data());
        }
        Self::new([w, h, slices.len()], voxel_size, channel, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn slice(&self, z: usize) -> Image2D {
        let n = self.dims[0] * self.dims[1];
        Image2D {
            width: self.dims[0],
            height: self.dims[1],
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<Image2D> {
        (0..self.dims[2]).map(|z| self.slice(z)).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Stack3D> {
        Stack3D::new(self.dims, self.voxel_size, self.channel, data)
    }
}

/// Binary 3D volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<bool>,
}

impl Mask3D {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::param("dims", "all dimensions must be > 0"));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(dims[0] * dims[1] * dims[2], data.len()));
        }
        Ok(Mask3D {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn empty(dims: [usize; 3], voxel_size: [f64; 3]) -> Self {
        Mask3D {
            dims,
            voxel_size,
            data: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Voxels strictly above `threshold`.
    pub fn threshold(stack: &Stack3D, threshold: f64) -> Self {
        Mask3D {
            dims: stack.dims(),
            voxel_size: stack.voxel_size(),
            data: stack.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn to_stack(&self) -> Stack3D {
        Stack3D {
            dims: self.dims,
            voxel_size: self.voxel_size,
            channel: None,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Nonzero voxels of `stack` become foreground.
    pub fn from_stack(stack: &Stack3D) -> Self {
        Self::threshold(stack, 0.0)
    }
}

/// A grid of per-pixel scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap(Image2D);

impl SaliencyMap {
    pub fn new(image: Image2D) -> Result<Self> {
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("saliency values must lie in [0, 1]".into()));
        }
        Ok(SaliencyMap(image))
    }

    pub fn image(&self) -> &Image2D {
        &self.0
    }

    pub fn into_image(self) -> Image2D {
        self.0
    }
}
