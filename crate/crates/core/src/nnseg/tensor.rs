use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image2D;

/// Channel-major `(C, H, W)` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TensorGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        TensorGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::param("tensor extent", "all dimensions must be > 0"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("tensor values must be finite".into()));
        }
        Ok(TensorGrid {
            channels,
            height,
            width,
            data,
        })
    }

    /// Internal constructor for intermediate activations, which may
    /// overflow during a diverging run and must reach the divergence check.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        TensorGrid {
            channels,
            height,
            width,
            data,
        }
    }

    /// Stack same-sized images as channels.
    pub fn from_images(images: &[&Image2D]) -> Result<Self> {
        let first = images.first().ok_or(Error::Empty("images"))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(w * h * images.len());
        for im in images {
            if im.dims() != (w, h) {
                return Err(Error::shape((w, h), im.dims()));
            }
            data.extend_from_slice(im.data());
        }
        Self::from_vec(images.len(), h, w, data)
    }

    pub fn channel_image(&self, c: usize) -> Image2D {
        Image2D::from_vec(self.width, self.height, self.channel(c).to_vec())
            .expect("channel slice has image extent")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copy of the window `[y0, y0 + h) × [x0, x0 + w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<TensorGrid> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::param("crop", "window exceeds tensor extent"));
        }
        let mut out = TensorGrid::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = (c * self.height + y0 + y) * self.width + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Centered window of the given extent.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<TensorGrid> {
        if h > self.height || w > self.width {
            return Err(Error::param("crop", "window exceeds tensor extent"));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }
}
