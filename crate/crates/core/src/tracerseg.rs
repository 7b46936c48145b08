//! Classical axon-tracer segmentation.
//!
//! Autofluorescence is similarly strong in the red and green channels, so
//! `T{t} = C_G - t * C_R` (clipped at zero) isolates the tracer. A
//! conservative and a permissive threshold are combined by morphological
//! reconstruction and smoothed by a disk closing; the result doubles as the
//! training-label generator for the learned backend.

use crate::error::{Error, Result};
use crate::image::{Image2D, Mask2D};
use crate::morph;

pub const DEFAULT_SUBTRACTION_FACTOR: f64 = 1.1;
pub const DEFAULT_HIGH_THRESHOLD: f64 = 300.0;
pub const DEFAULT_LOW_THRESHOLD: f64 = 100.0;
pub const DEFAULT_CLOSE_RADIUS: usize = 3;
/// Saliency cut applied to the network's tracer map.
pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.5;

/// Green channel after red-channel background subtraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtractedSignal {
    pub signal: Image2D,
    pub factor: f64,
}

/// Segmented tracer: binary support and the tracer signal restricted to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TracerLabel {
    pub mask: Mask2D,
    pub signal: Image2D,
}

/// Per pixel: 0 if `C_G < t * C_R`, else `C_G - t * C_R`.
pub fn background_subtract(cg: &Image2D, cr: &Image2D, t: f64) -> Result<SubtractedSignal> {
    cg.same_shape(cr)?;
    if !(t > 0.0) {
        return Err(Error::param("t", "must be > 0"));
    }
    let data = cg
        .data()
        .iter()
        .zip(cr.data())
        .map(|(&g, &r)| {
            let bg = t * r;
            if g < bg {
                0.0
            } else {
                g - bg
            }
        })
        .collect();
    Ok(SubtractedSignal {
        signal: Image2D::from_vec(cg.width(), cg.height(), data)?,
        factor: t,
    })
}

/// `(T > hi, T > lo)`; the first is a subset of the second.
pub fn double_threshold(t: &SubtractedSignal, hi: f64, lo: f64) -> Result<(Mask2D, Mask2D)> {
    if !(lo < hi) || !(lo > 0.0) {
        return Err(Error::param("thresholds", "require 0 < lo < hi"));
    }
    Ok((
        Mask2D::threshold(&t.signal, hi),
        Mask2D::threshold(&t.signal, lo),
    ))
}

/// Connected regions of the low-threshold mask touched by the high one.
pub fn morph_reconstruct(marker: &Mask2D, mask: &Mask2D) -> Result<Mask2D> {
    morph::reconstruct(marker, mask)
}

/// Disk closing.
pub fn morph_close(mask: &Mask2D, radius: usize) -> Result<Mask2D> {
    morph::close(mask, radius)
}

/// `mask = saliency > theta`, `L = mask * T`.
pub fn compose_label(saliency: &Image2D, t: &SubtractedSignal, theta: f64) -> Result<TracerLabel> {
    saliency.same_shape(&t.signal)?;
    let mask = Mask2D::threshold(saliency, theta);
    let signal = apply_mask(&mask, &t.signal);
    Ok(TracerLabel { mask, signal })
}

fn apply_mask(mask: &Mask2D, signal: &Image2D) -> Image2D {
    Image2D::from_fn(signal.width(), signal.height(), |x, y| {
        if mask.get(x, y) {
            signal.get(x, y)
        } else {
            0.0
        }
    })
}

/// Parameters of the thresholding pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    pub factor: f64,
    pub hi: f64,
    pub lo: f64,
    pub close_radius: usize,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams {
            factor: DEFAULT_SUBTRACTION_FACTOR,
            hi: DEFAULT_HIGH_THRESHOLD,
            lo: DEFAULT_LOW_THRESHOLD,
            close_radius: DEFAULT_CLOSE_RADIUS,
        }
    }
}

/// Subtract, double-threshold, reconstruct, close. `L` is the subtracted
/// signal restricted to the closed mask.
pub fn threshold_pipeline(cg: &Image2D, cr: &Image2D, p: &ThresholdParams) -> Result<TracerLabel> {
    let t = background_subtract(cg, cr, p.factor)?;
    let (hi, lo) = double_threshold(&t, p.hi, p.lo)?;
    let rec = morph_reconstruct(&hi, &lo)?;
    let mask = morph_close(&rec, p.close_radius)?;
    let signal = apply_mask(&mask, &t.signal);
    Ok(TracerLabel { mask, signal })
}
