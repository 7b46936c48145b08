//! Per-pixel loss weights.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter::{convolve_axis, gaussian_kernel};
use crate::image::{Image2D, Mask2D};

pub const DEFAULT_RADIUS_ZERO: usize = 5;
pub const DEFAULT_BOUNDARY_WEIGHT: f64 = 2.0;
pub const DEFAULT_LABEL_WEIGHT: f64 = 500.0;
pub const DEFAULT_STRUCTURE_WEIGHT: f64 = 2.0;
pub const DEFAULT_LOG_SIGMA: f64 = 2.0;
/// On the scale-normalized response, in image intensity units.
pub const DEFAULT_LOG_THRESHOLD: f64 = 100.0;
pub const DEFAULT_TRACER_WEIGHT: f64 = 8.0;
pub const DEFAULT_NEGATIVE_WEIGHT: f64 = 100.0;

/// Nonnegative per-pixel weights congruent with a label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(Image2D);

impl WeightMap {
    pub fn new(image: Image2D) -> Result<Self> {
        if image.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidData("weights must be finite and >= 0".into()));
        }
        Ok(WeightMap(image))
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        WeightMap(Image2D::filled(width, height, 1.0))
    }

    pub fn image(&self) -> &Image2D {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<WeightMap> {
        Ok(WeightMap(self.0.crop(x0, y0, w, h)?))
    }

    /// Multiply every weight by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<WeightMap> {
        if !(c > 0.0) {
            return Err(Error::param("c", "must be > 0"));
        }
        Ok(WeightMap(self.0.map(|v| v * c)))
    }
}

/// Second derivative of the sampled Gaussian, corrected to zero sum so flat
/// regions respond with exactly zero.
fn second_derivative_kernel(sigma: f64) -> Result<Vec<f64>> {
    let g = gaussian_kernel(sigma)?;
    let r = (g.len() / 2) as f64;
    let s4 = sigma * sigma * sigma * sigma;
    let mut k: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, &gv)| {
            let x = i as f64 - r;
            gv * (x * x - sigma * sigma) / s4
        })
        .collect();
    let total: f64 = k.iter().sum();
    for (kv, gv) in k.iter_mut().zip(&g) {
        *kv -= total * gv;
    }
    Ok(k)
}

/// Scale-normalized Laplacian of Gaussian `σ² (G_xx + G_yy) * I`.
pub fn laplacian_of_gaussian(image: &Image2D, sigma: f64) -> Result<Image2D> {
    let g = gaussian_kernel(sigma)?;
    let d2 = second_derivative_kernel(sigma)?;
    let dims = [image.width(), image.height(), 1];
    let xx = convolve_axis(&convolve_axis(image.data(), dims, 0, &d2), dims, 1, &g);
    let yy = convolve_axis(&convolve_axis(image.data(), dims, 0, &g), dims, 1, &d2);
    let s2 = sigma * sigma;
    let data = xx.iter().zip(&yy).map(|(a, b)| s2 * (a + b)).collect();
    Image2D::from_vec(image.width(), image.height(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeightParams {
    pub radius_zero: usize,
    pub boundary_weight: f64,
    pub label_weight: f64,
    pub structure_weight: f64,
    pub log_sigma: f64,
    pub log_threshold: f64,
}

impl Default for CellWeightParams {
    fn default() -> Self {
        CellWeightParams {
            radius_zero: DEFAULT_RADIUS_ZERO,
            boundary_weight: DEFAULT_BOUNDARY_WEIGHT,
            label_weight: DEFAULT_LABEL_WEIGHT,
            structure_weight: DEFAULT_STRUCTURE_WEIGHT,
            log_sigma: DEFAULT_LOG_SIGMA,
            log_threshold: DEFAULT_LOG_THRESHOLD,
        }
    }
}

/// Weight map for cell-center labels.
///
/// Starts at 1; pixels with a strong LoG response get the structure weight;
/// each labelled center gets a ring of `boundary_weight` at distance
/// `(r, r + 1]`, a zero disk of radius `r`, and `label_weight` at the center
/// itself (applied in that order).
pub fn build_cell_weight_map(labels: &Mask2D, image: &Image2D, p: &CellWeightParams) -> Result<WeightMap> {
    if labels.dims() != image.dims() {
        return Err(Error::shape(image.dims(), labels.dims()));
    }
    let (w, h) = labels.dims();
    let mut out = Image2D::filled(w, h, 1.0);
    let log = laplacian_of_gaussian(image, p.log_sigma)?;
    for (o, &v) in out.data_mut().iter_mut().zip(log.data()) {
        if v.abs() > p.log_threshold {
            *o = p.structure_weight;
        }
    }
    let centers: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| labels.get(x, y))
        .collect();
    let r = p.radius_zero as isize;
    let r2 = r * r;
    let r1 = (r + 1) * (r + 1);
    let visit = |out: &mut Image2D, cx: usize, cy: usize, reach: isize, f: &dyn Fn(isize) -> Option<f64>| {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                    continue;
                }
                if let Some(v) = f(dx * dx + dy * dy) {
                    out.set(x as usize, y as usize, v);
                }
            }
        }
    };
    for &(cx, cy) in &centers {
        visit(&mut out, cx, cy, r + 1, &|d2| (d2 > r2 && d2 <= r1).then_some(p.boundary_weight));
    }
    for &(cx, cy) in &centers {
        visit(&mut out, cx, cy, r, &|d2| (d2 <= r2).then_some(0.0));
    }
    for &(cx, cy) in &centers {
        out.set(cx, cy, p.label_weight);
    }
    WeightMap::new(out)
}

/// Tracer weights: 1 by default, `tracer_weight` on tracer pixels and
/// `negative_weight` on pixels annotated as false positives.
pub fn build_tracer_weight_map(
    labels: &Mask2D,
    negatives: Option<&Mask2D>,
    tracer_weight: f64,
    negative_weight: f64,
) -> Result<WeightMap> {
    if let Some(n) = negatives {
        if n.dims() != labels.dims() {
            return Err(Error::shape(labels.dims(), n.dims()));
        }
    }
    let (w, h) = labels.dims();
    let img = Image2D::from_fn(w, h, |x, y| {
        if negatives.is_some_and(|n| n.get(x, y)) {
            negative_weight
        } else if labels.get(x, y) {
            tracer_weight
        } else {
            1.0
        }
    });
    WeightMap::new(img)
}
