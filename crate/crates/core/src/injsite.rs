//! Injection-site localization.
//!
//! The rough stage works on the low-resolution blue-channel volume: binarize,
//! count positives in a Gaussian neighbourhood, keep everything above half the
//! peak count, and retain the largest connected region. The precise stage
//! finds cell bodies as in-plane local maxima of a per-slice saliency map
//! inside the region of interest the rough mask projects to.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter;
use crate::image::{Image2D, Mask3D, Stack3D};
use crate::math;

pub const DEFAULT_T_RAW: f64 = 4500.0;
pub const DEFAULT_SIGMA_UM: f64 = 150.0;
pub const DEFAULT_T_HIGH: f64 = 0.5;
/// Regularizer in the denominator of the Hessian cell response.
pub const HESSIAN_EPS: f64 = 1e-12;

/// Result of the rough localization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionMask {
    pub mask: Mask3D,
    pub t_raw: f64,
    /// Second, relative threshold actually used (half the peak count).
    pub t_low: f64,
}

impl InjectionMask {
    /// True when no voxel passed the raw threshold.
    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Rough injection-site mask from the low-resolution blue channel.
pub fn rough_localize(low_cb: &Stack3D, t_raw: f64, sigma_um: f64) -> Result<InjectionMask> {
    if !(sigma_um > 0.0) {
        return Err(Error::param("sigma_um", "must be > 0"));
    }
    let binary = Mask3D::threshold(low_cb, t_raw);
    if binary.is_empty() {
        return Ok(InjectionMask {
            mask: binary,
            t_raw,
            t_low: 0.0,
        });
    }
    let counts = filter::gaussian_blur_stack(&binary.to_stack(), sigma_um)?;
    let t_low = 0.5 * counts.max();
    let candidates = Mask3D::threshold(&counts, t_low);
    Ok(InjectionMask {
        mask: largest_component(&candidates),
        t_raw,
        t_low,
    })
}

/// Keep the largest 6-connected foreground component. Ties go to the
/// component containing the smallest linear index.
pub fn largest_component(mask: &Mask3D) -> Mask3D {
    let [nx, ny, nz] = mask.dims();
    let n = nx * ny * nz;
    let mut label = vec![0u32; n];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !mask.data()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut visit = |j: usize| {
                if mask.data()[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        // scanning in linear order means an earlier label already holds the
        // smaller minimum index, so only strictly larger sizes replace it
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    let keep = best.map_or(0, |(l, _)| l);
    let data = label.iter().map(|&l| l != 0 && l == keep).collect();
    Mask3D::new(mask.dims(), mask.voxel_size(), data).expect("dims unchanged")
}

#[inline]
fn mirrored(img: &Image2D, x: isize, y: isize) -> f64 {
    img.get(
        filter::reflect_index(x, img.width()),
        filter::reflect_index(y, img.height()),
    )
}

/// Eigenvalues of a symmetric 2x2 matrix ordered so that `|l1| >= |l2|`.
pub fn sym2_eigen(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let d = math::hypot(0.5 * (a - c), b);
    let (e1, e2) = (mean + d, mean - d);
    if e1.abs() >= e2.abs() {
        (e1, e2)
    } else {
        (e2, e1)
    }
}

/// Cell response at a single scale: `-l1 * |l2| / (|l1| + eps)` where `l2 < 0`,
/// zero elsewhere, from central-difference Hessians of the blurred image.
pub fn hessian_response(slice: &Image2D, sigma: f64) -> Result<Image2D> {
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", "must be > 0"));
    }
    let g = filter::gaussian_blur_image(slice, sigma)?;
    let (w, h) = g.dims();
    Ok(Image2D::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let c = mirrored(&g, x, y);
        let dxx = mirrored(&g, x + 1, y) - 2.0 * c + mirrored(&g, x - 1, y);
        let dyy = mirrored(&g, x, y + 1) - 2.0 * c + mirrored(&g, x, y - 1);
        let dxy = 0.25
            * (mirrored(&g, x + 1, y + 1) - mirrored(&g, x + 1, y - 1)
                - mirrored(&g, x - 1, y + 1)
                + mirrored(&g, x - 1, y - 1));
        let (l1, l2) = sym2_eigen(dxx, dxy, dyy);
        if l2 < 0.0 {
            -l1 * l2.abs() / (l1.abs() + HESSIAN_EPS)
        } else {
            0.0
        }
    }))
}

/// Multi-scale Hessian cell filter: per-pixel maximum over `sigmas` (pixels).
pub fn hessian_cell_filter(slice: &Image2D, sigmas: &[f64]) -> Result<Image2D> {
    if sigmas.is_empty() {
        return Err(Error::param("sigmas", "at least one scale is required"));
    }
    let mut out: Option<Image2D> = None;
    for &s in sigmas {
        let r = hessian_response(slice, s)?;
        out = Some(match out {
            None => r,
            Some(mut acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(r.data()) {
                    *a = a.max(b);
                }
                acc
            }
        });
    }
    Ok(out.expect("sigmas nonempty"))
}

/// A detected cell body in full-resolution voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPoint {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub score: f64,
}

/// Detected cell bodies across slices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellPointCloud {
    pub points: Vec<CellPoint>,
}

impl CellPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points whose score is strictly above `t`.
    pub fn above(&self, t: f64) -> CellPointCloud {
        CellPointCloud {
            points: self.points.iter().copied().filter(|p| p.score > t).collect(),
        }
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Rect {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Strict 8-neighbour local maxima above `t_high` in one slice, optionally
/// restricted to `roi`. Neighbours outside the image do not compete.
pub fn detect_cells_in_slice(saliency: &Image2D, z: usize, t_high: f64, roi: Option<Rect>) -> Vec<CellPoint> {
    let (w, h) = saliency.dims();
    let roi = roi.unwrap_or(Rect::full(w, h));
    let mut out = Vec::new();
    for y in roi.y0..roi.y1.min(h) {
        for x in roi.x0..roi.x1.min(w) {
            let v = saliency.get(x, y);
            if !(v > t_high) {
                continue;
            }
            let mut is_max = true;
            'n: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    if saliency.get(nx as usize, ny as usize) >= v {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                out.push(CellPoint { x, y, z, score: v });
            }
        }
    }
    out
}

/// Cell detection over a set of `(z, saliency)` slices, each with an
/// optional region of interest.
pub fn detect_cells<'a, I>(slices: I, t_high: f64) -> CellPointCloud
where
    I: IntoIterator<Item = (usize, &'a Image2D, Option<Rect>)>,
{
    let mut points = Vec::new();
    for (z, s, roi) in slices {
        points.extend(detect_cells_in_slice(s, z, t_high, roi));
    }
    CellPointCloud { points }
}

/// Full-resolution region of interest derived from a low-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    /// Inclusive z range.
    pub z_min: usize,
    pub z_max: usize,
    /// One rectangle per z in `z_min..=z_max`; `None` if the slice has no
    /// mask voxel.
    pub rects: Vec<Option<Rect>>,
}

impl Roi {
    pub fn rect(&self, z: usize) -> Option<Rect> {
        if z < self.z_min || z > self.z_max {
            return None;
        }
        self.rects[z - self.z_min]
    }
}

/// Project a low-resolution mask onto the full-resolution slice grid.
///
/// In-plane, low voxel `x` covers full-resolution pixels
/// `[round(x*s), round((x+1)*s))` with `s = low_voxel / high_voxel`; z maps
/// 1:1 since both stacks are sampled once per section. Each per-slice
/// bounding box is padded by `pad_px` and clipped to `high_extent`.
pub fn roi_from_mask(
    mask: &InjectionMask,
    high_voxel: [f64; 2],
    low_voxel: [f64; 2],
    high_extent: (usize, usize),
    pad_px: usize,
) -> Result<Roi> {
    let m = &mask.mask;
    if m.is_empty() {
        return Err(Error::Empty("injection mask"));
    }
    let [nx, ny, nz] = m.dims();
    let sx = low_voxel[0] / high_voxel[0];
    let sy = low_voxel[1] / high_voxel[1];
    let (mut z_min, mut z_max) = (usize::MAX, 0);
    let mut per_z: Vec<Option<(usize, usize, usize, usize)>> = vec![None; nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                z_min = z_min.min(z);
                z_max = z_max.max(z);
                let b = per_z[z].get_or_insert((x, y, x, y));
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
        }
    }
    let (w, h) = high_extent;
    let rects = (z_min..=z_max)
        .map(|z| {
            per_z[z].map(|(x0, y0, x1, y1)| {
                let px0 = math::round(x0 as f64 * sx) as usize;
                let py0 = math::round(y0 as f64 * sy) as usize;
                let px1 = math::round((x1 + 1) as f64 * sx) as usize;
                let py1 = math::round((y1 + 1) as f64 * sy) as usize;
                Rect {
                    x0: px0.saturating_sub(pad_px).min(w),
                    y0: py0.saturating_sub(pad_px).min(h),
                    x1: (px1 + pad_px).min(w),
                    y1: (py1 + pad_px).min(h),
                }
            })
        })
        .collect();
    Ok(Roi {
        z_min,
        z_max,
        rects,
    })
}
