//! Flat-field (vignetting) estimation and correction.
//!
//! Observed tiles follow `I = Î · F` (the darkfield term is negligible for
//! two-photon detectors and fixed to zero). Averaging many tiles of one
//! channel gives `F` up to a constant; dividing by the grid mean yields the
//! normalized field `F̂` and the corrected tile is `I / F̂`.
//!
//! The running average is kept as per-pixel `(sum, count)` accumulators so
//! the estimate does not depend on tile order, and partial accumulators from
//! parallel producers can be merged.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{Channel, Image2D, Tile2D};

/// Pixels darker than this carry no information.
pub const DEFAULT_LOWER_CUT: f64 = 2.0;
/// Pixels brighter than this are most likely tracer signal.
pub const DEFAULT_UPPER_CUT: f64 = 2500.0;

/// Mean-normalized multiplicative shading field of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingField {
    values: Image2D,
    pub channel: Channel,
    /// Number of tiles that went into the estimate.
    pub sample_count: usize,
    /// Per-pixel number of non-outlier contributions.
    pub valid_count: Vec<u32>,
    /// Pixels that never received a valid contribution and were set to 1.
    pub unfilled: usize,
}

impl ShadingField {
    /// Wrap an existing field, e.g. one loaded from disk. Values must be > 0.
    pub fn from_image(values: Image2D, channel: Channel) -> Result<Self> {
        if values.data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidData("shading field must be strictly positive".into()));
        }
        let n = values.data().len();
        Ok(ShadingField {
            values,
            channel,
            sample_count: 0,
            valid_count: vec![0; n],
            unfilled: 0,
        })
    }

    /// A field that applies no correction.
    pub fn flat(width: usize, height: usize, channel: Channel) -> Self {
        ShadingField {
            values: Image2D::filled(width, height, 1.0),
            channel,
            sample_count: 0,
            valid_count: vec![0; width * height],
            unfilled: 0,
        }
    }

    pub fn values(&self) -> &Image2D {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }
}

/// Per-pixel `(sum, count)` running average over a tile stream.
#[derive(Debug, Clone)]
pub struct ShadingAccumulator {
    width: usize,
    height: usize,
    channel: Channel,
    lower_cut: f64,
    upper_cut: f64,
    sum: Vec<f64>,
    count: Vec<u32>,
    tiles: usize,
}

impl ShadingAccumulator {
    pub fn new(
        width: usize,
        height: usize,
        channel: Channel,
        lower_cut: f64,
        upper_cut: f64,
    ) -> Result<Self> {
        if !(lower_cut < upper_cut) {
            return Err(Error::param("lower_cut", "must be < upper_cut"));
        }
        if width == 0 || height == 0 {
            return Err(Error::param("tile extent", "must be > 0"));
        }
        Ok(ShadingAccumulator {
            width,
            height,
            channel,
            lower_cut,
            upper_cut,
            sum: vec![0.0; width * height],
            count: vec![0; width * height],
            tiles: 0,
        })
    }

    pub fn add(&mut self, tile: &Tile2D) -> Result<()> {
        if tile.width() != self.width || tile.height() != self.height {
            return Err(Error::shape(
                (self.width, self.height),
                (tile.width(), tile.height()),
            ));
        }
        if tile.channel != self.channel {
            return Err(Error::ChannelMismatch {
                expected: self.channel.tag().into(),
                found: tile.channel.tag().into(),
            });
        }
        let (lo, hi) = (self.lower_cut, self.upper_cut);
        for ((s, c), &p) in self.sum.iter_mut().zip(&mut self.count).zip(tile.pixels()) {
            let v = f64::from(p);
            if v >= lo && v <= hi {
                *s += v;
                *c += 1;
            }
        }
        self.tiles += 1;
        Ok(())
    }

    /// Merge a partial accumulator built over a disjoint part of the stream.
    pub fn merge(&mut self, other: &ShadingAccumulator) -> Result<()> {
        if (other.width, other.height) != (self.width, self.height)
            || other.channel != self.channel
            || other.lower_cut != self.lower_cut
            || other.upper_cut != self.upper_cut
        {
            return Err(Error::InvalidData("accumulators are not compatible".into()));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += *b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += *b;
        }
        self.tiles += other.tiles;
        Ok(())
    }

    pub fn tiles(&self) -> usize {
        self.tiles
    }

    pub fn finish(self) -> Result<ShadingField> {
        if self.tiles == 0 {
            return Err(Error::Empty("tile stream"));
        }
        let mut mean: Vec<f64> = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| if c > 0 { s / f64::from(c) } else { 0.0 })
            .collect();
        let valid: Vec<usize> = (0..mean.len()).filter(|&i| self.count[i] > 0).collect();
        let unfilled = mean.len() - valid.len();
        let grid_mean = if valid.is_empty() {
            0.0
        } else {
            valid.iter().map(|&i| mean[i]).sum::<f64>() / valid.len() as f64
        };
        for (i, v) in mean.iter_mut().enumerate() {
            *v = if self.count[i] > 0 && grid_mean > 0.0 {
                *v / grid_mean
            } else {
                1.0
            };
        }
        // A pixel whose only contributions were exactly 0 would give a zero
        // factor; lower_cut > 0 rules that out unless the caller set it to 0.
        if mean.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidData(
                "shading estimate has non-positive pixels; raise lower_cut above 0".into(),
            ));
        }
        Ok(ShadingField {
            values: Image2D::from_vec(self.width, self.height, mean)?,
            channel: self.channel,
            sample_count: self.tiles,
            valid_count: self.count,
            unfilled,
        })
    }
}

/// Estimate the shading field of one channel from a stream of tiles.
pub fn estimate_shading<'a, I>(tiles: I, lower_cut: f64, upper_cut: f64) -> Result<ShadingField>
where
    I: IntoIterator<Item = &'a Tile2D>,
{
    let mut iter = tiles.into_iter();
    let first = iter.next().ok_or(Error::Empty("tile stream"))?;
    let mut acc = ShadingAccumulator::new(
        first.width(),
        first.height(),
        first.channel,
        lower_cut,
        upper_cut,
    )?;
    acc.add(first)?;
    for t in iter {
        acc.add(t)?;
    }
    acc.finish()
}

/// Divide a tile by the shading field, re-quantizing to 16 bits.
pub fn correct_tile(tile: &Tile2D, field: &ShadingField) -> Result<Tile2D> {
    if (tile.width(), tile.height()) != (field.width(), field.height()) {
        return Err(Error::shape(
            (field.width(), field.height()),
            (tile.width(), tile.height()),
        ));
    }
    if tile.channel != field.channel {
        return Err(Error::ChannelMismatch {
            expected: field.channel.tag().into(),
            found: tile.channel.tag().into(),
        });
    }
    let img = Image2D::from_vec(
        tile.width(),
        tile.height(),
        tile.pixels()
            .iter()
            .zip(field.values.data())
            .map(|(&p, &f)| f64::from(p) / f)
            .collect(),
    )?;
    tile.with_image(&img)
}
