//! Random rotation, global scaling, smooth elastic deformation and gamma
//! correction of training samples.
//!
//! Every output pixel `p` (relative to the output center) reads the source
//! at `c + R(θ) p / s + d(p)`, where `c` is the source position of the
//! output center under a plain center crop and `d` the elastic displacement.
//! The image is resampled bilinearly; label and weight map by nearest
//! neighbour so they stay categorical. Isolated positive label pixels are in
//! addition forwarded to the output pixel whose source position is closest,
//! so thinning under zoom-out never drops a cell center.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::TensorGrid;
use super::train::TrainingSample;
use super::weights::WeightMap;
use crate::error::{Error, Result};
use crate::filter::{gaussian_blur_grid, reflect_index};
use crate::image::{Image2D, Mask2D};
use crate::math;

pub const DEFAULT_GAMMA_RANGE: (f64, f64) = (0.7, 1.4);
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const DEFAULT_ELASTIC_GRID: usize = 8;
pub const DEFAULT_ELASTIC_STD: f64 = 10.0;
pub const DEFAULT_ELASTIC_SIGMA: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub gamma_range: (f64, f64),
    pub scale_range: (f64, f64),
    /// Control points per side of the elastic displacement grid; 0 disables.
    pub elastic_grid: usize,
    pub elastic_std: f64,
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            gamma_range: DEFAULT_GAMMA_RANGE,
            scale_range: DEFAULT_SCALE_RANGE,
            elastic_grid: DEFAULT_ELASTIC_GRID,
            elastic_std: DEFAULT_ELASTIC_STD,
            elastic_sigma: DEFAULT_ELASTIC_SIGMA,
        }
    }
}

/// One concrete draw of the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub angle: f64,
    pub scale: f64,
    pub gamma: f64,
    /// Displacement `(dx, dy)` per output pixel, row-major, or `None`.
    pub displacement: Option<(Image2D, Image2D)>,
}

impl AugmentParams {
    pub fn neutral() -> Self {
        AugmentParams {
            angle: 0.0,
            scale: 1.0,
            gamma: 1.0,
            displacement: None,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl AugmentConfig {
    pub fn draw(&self, out_extent: usize, rng: &mut ChaCha8Rng) -> Result<AugmentParams> {
        let angle = if self.rotate {
            rng.random_range(0.0..core::f64::consts::TAU)
        } else {
            0.0
        };
        let gamma = uniform(rng, self.gamma_range);
        let scale = uniform(rng, self.scale_range);
        let displacement = if self.elastic_grid >= 2 && self.elastic_std > 0.0 {
            Some(elastic_field(out_extent, self.elastic_grid, self.elastic_std, self.elastic_sigma, rng)?)
        } else {
            None
        };
        Ok(AugmentParams {
            angle,
            scale,
            gamma,
            displacement,
        })
    }
}

/// Random control-grid displacements, bilinearly upsampled to `n × n` and
/// smoothed.
pub fn elastic_field(
    n: usize,
    grid: usize,
    std: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Image2D, Image2D)> {
    if grid < 2 || n == 0 {
        return Err(Error::param("elastic_grid", "needs at least 2 control points and a nonempty output"));
    }
    let normal = Normal::new(0.0, std).map_err(|_| Error::param("elastic_std", "must be finite and >= 0"))?;
    let mut comp = || -> Result<Image2D> {
        let ctrl: Vec<f64> = (0..grid * grid).map(|_| normal.sample(rng)).collect();
        let step = if n > 1 { (grid - 1) as f64 / (n - 1) as f64 } else { 0.0 };
        let up = Image2D::from_fn(n, n, |x, y| {
            let (gx, gy) = (x as f64 * step, y as f64 * step);
            let (ix, iy) = ((gx as usize).min(grid - 2), (gy as usize).min(grid - 2));
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let at = |i: usize, j: usize| ctrl[i + grid * j];
            (1.0 - fy) * ((1.0 - fx) * at(ix, iy) + fx * at(ix + 1, iy))
                + fy * ((1.0 - fx) * at(ix, iy + 1) + fx * at(ix + 1, iy + 1))
        });
        if sigma > 0.0 {
            let d = gaussian_blur_grid(up.data(), [n, n, 1], [sigma, sigma, 0.0])?;
            Image2D::from_vec(n, n, d)
        } else {
            Ok(up)
        }
    };
    let dx = comp()?;
    let dy = comp()?;
    Ok((dx, dy))
}

/// Draw parameters from `seed` with the default configuration and apply.
pub fn augment(sample: &TrainingSample, out_extent: usize, seed: u64) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AugmentConfig::default().draw(out_extent, &mut rng)?;
    augment_with(sample, out_extent, &p)
}

/// Snap values within 1e-12 of an integer, so quarter turns are exact.
fn snap(v: f64) -> f64 {
    let r = math::round(v);
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}

struct Warp {
    cos: f64,
    sin: f64,
    inv_scale: f64,
    center_out: f64,
    center_src: (f64, f64),
    n: usize,
}

impl Warp {
    fn source(&self, p: &AugmentParams, x: usize, y: usize) -> (f64, f64) {
        let (qx, qy) = (x as f64 - self.center_out, y as f64 - self.center_out);
        let mut sx = self.center_src.0 + (self.cos * qx - self.sin * qy) * self.inv_scale;
        let mut sy = self.center_src.1 + (self.sin * qx + self.cos * qy) * self.inv_scale;
        if let Some((dx, dy)) = &p.displacement {
            sx += dx.get(x, y);
            sy += dy.get(x, y);
        }
        (sx, sy)
    }
}

fn bilinear(src: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (math::floor(x), math::floor(y));
    let (tx, ty) = (x - fx, y - fy);
    let (ix, iy) = (fx as isize, fy as isize);
    let at = |i: isize, j: isize| src[reflect_index(i, w) + w * reflect_index(j, h)];
    let mut v = 0.0;
    if tx == 0.0 && ty == 0.0 {
        return at(ix, iy);
    }
    v += (1.0 - tx) * (1.0 - ty) * at(ix, iy);
    v += tx * (1.0 - ty) * at(ix + 1, iy);
    v += (1.0 - tx) * ty * at(ix, iy + 1);
    v += tx * ty * at(ix + 1, iy + 1);
    v
}

fn nearest_index(w: usize, h: usize, x: f64, y: f64) -> usize {
    let (ix, iy) = (math::round(x) as isize, math::round(y) as isize);
    reflect_index(ix, w) + w * reflect_index(iy, h)
}

/// Apply a concrete transform and crop to `out_extent × out_extent`.
pub fn augment_with(sample: &TrainingSample, out_extent: usize, p: &AugmentParams) -> Result<TrainingSample> {
    let (w, h) = sample.extent();
    let n = out_extent;
    if n == 0 || w < n || h < n {
        return Err(Error::param("out_extent", "sample is smaller than the requested output"));
    }
    if !(p.scale > 0.0) || !(p.gamma > 0.0) {
        return Err(Error::param("augment", "scale and gamma must be > 0"));
    }
    if let Some((dx, dy)) = &p.displacement {
        if dx.dims() != (n, n) || dy.dims() != (n, n) {
            return Err(Error::shape((n, n), dx.dims()));
        }
    }
    let center_out = (n - 1) as f64 / 2.0;
    let warp = Warp {
        cos: snap(math::cos(p.angle)),
        sin: snap(math::sin(p.angle)),
        inv_scale: 1.0 / p.scale,
        center_out,
        center_src: (((w - n) / 2) as f64 + center_out, ((h - n) / 2) as f64 + center_out),
        n,
    };
    let coords: Vec<(f64, f64)> = (0..n)
        .flat_map(|y| (0..n).map(move |x| (x, y)))
        .map(|(x, y)| warp.source(p, x, y))
        .collect();

    let c = sample.input.channels();
    let mut out = TensorGrid::zeros(c, n, n);
    for ch in 0..c {
        let src = sample.input.channel(ch);
        let peak = src.iter().cloned().fold(0.0f64, f64::max);
        let dst = out.channel_mut(ch);
        for (d, &(sx, sy)) in dst.iter_mut().zip(&coords) {
            let mut v = bilinear(src, w, h, sx, sy);
            if p.gamma != 1.0 && peak > 0.0 {
                v = peak * math::powf((v / peak).max(0.0), p.gamma);
            }
            *d = v;
        }
    }

    let label_src = sample.label.data();
    let weight_src = sample.weights.image().data();
    let mut label = vec![false; n * n];
    let mut weights = vec![0.0; n * n];
    for (i, &(sx, sy)) in coords.iter().enumerate() {
        let j = nearest_index(w, h, sx, sy);
        label[i] = label_src[j];
        weights[i] = weight_src[j];
    }
    forward_points(sample, &warp, &coords, &mut label, &mut weights);

    TrainingSample::new(
        out,
        Mask2D::from_vec(n, n, label)?,
        WeightMap::new(Image2D::from_vec(n, n, weights)?)?,
    )
}

/// Place every isolated positive source pixel at the output pixel whose
/// source position is nearest, if that position lies inside the sampled
/// footprint.
fn forward_points(sample: &TrainingSample, warp: &Warp, coords: &[(f64, f64)], label: &mut [bool], weights: &mut [f64]) {
    let (w, h) = sample.extent();
    let n = warp.n;
    let lab = &sample.label;
    let isolated = |x: usize, y: usize| {
        (-1isize..=1).all(|dy| {
            (-1isize..=1).all(|dx| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                (dx == 0 && dy == 0)
                    || nx < 0
                    || ny < 0
                    || nx as usize >= w
                    || ny as usize >= h
                    || !lab.get(nx as usize, ny as usize)
            })
        })
    };
    let dist2 = |i: usize, q: (f64, f64)| {
        let (sx, sy) = coords[i];
        (sx - q.0) * (sx - q.0) + (sy - q.1) * (sy - q.1)
    };
    for y in 0..h {
        for x in 0..w {
            if !lab.get(x, y) || !isolated(x, y) {
                continue;
            }
            let q = (x as f64, y as f64);
            // start from the inverse of the affine part, then descend
            let (rx, ry) = (q.0 - warp.center_src.0, q.1 - warp.center_src.1);
            let s = 1.0 / warp.inv_scale;
            let gx = warp.center_out + s * (warp.cos * rx + warp.sin * ry);
            let gy = warp.center_out + s * (-warp.sin * rx + warp.cos * ry);
            let clampi = |v: f64| (math::round(v).max(0.0) as usize).min(n - 1);
            let (mut px, mut py) = (clampi(gx), clampi(gy));
            let mut best = dist2(px + n * py, q);
            loop {
                let mut moved = false;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny) = (px as isize + dx, py as isize + dy);
                        if nx < 0 || ny < 0 || nx as usize >= n || ny as usize >= n {
                            continue;
                        }
                        let d = dist2(nx as usize + n * ny as usize, q);
                        if d < best {
                            best = d;
                            px = nx as usize;
                            py = ny as usize;
                            moved = true;
                        }
                    }
                }
                if !moved {
                    break;
                }
            }
            let reach = 0.75 * warp.inv_scale;
            if best <= reach * reach {
                let i = px + n * py;
                label[i] = true;
                weights[i] = sample.weights.get(x, y);
            }
        }
    }
}
