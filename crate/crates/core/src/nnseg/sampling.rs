//! Density-guided selection of training tiles from a labelled slice.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::TensorGrid;
use super::train::TrainingSample;
use super::weights::WeightMap;
use crate::error::{Error, Result};
use crate::filter::gaussian_blur_image;
use crate::image::{Image2D, Mask2D};

pub const DEFAULT_DENSE_TILES: usize = 10;
pub const DEFAULT_SPARSE_TILES: usize = 10;
pub const DEFAULT_TILE_EXTENT: usize = 810;
pub const DEFAULT_DENSITY_SIGMA: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileSampling {
    pub n_dense: usize,
    pub n_sparse: usize,
    pub tile: usize,
    /// Gaussian σ (pixels) of the label density map.
    pub density_sigma: f64,
}

impl Default for TileSampling {
    fn default() -> Self {
        TileSampling {
            n_dense: DEFAULT_DENSE_TILES,
            n_sparse: DEFAULT_SPARSE_TILES,
            tile: DEFAULT_TILE_EXTENT,
            density_sigma: DEFAULT_DENSITY_SIGMA,
        }
    }
}

/// A drawn tile: top-left corner, center, which sampler drew it, and the
/// cropped sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTile {
    pub origin: (usize, usize),
    pub center: (usize, usize),
    pub dense: bool,
    pub sample: TrainingSample,
}

/// Gaussian-smoothed label indicator.
pub fn label_density(labels: &Mask2D, sigma: f64) -> Result<Image2D> {
    gaussian_blur_image(&labels.to_image(), sigma)
}

fn draw_centers(
    weights: &[f64],
    count: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    match WeightedIndex::new(weights) {
        Ok(dist) => {
            for _ in 0..count {
                let i = dist.sample(rng);
                out.push((i % cols, i / cols));
            }
        }
        // degenerate (all-zero) density: uniform over admissible centers
        Err(_) => {
            for _ in 0..count {
                let i = rng.random_range(0..weights.len());
                out.push((i % cols, i / cols));
            }
        }
    }
    out
}

/// Draw `n_dense` tile centers with probability proportional to the label
/// density and `n_sparse` proportional to `max density - density`. Centers
/// are restricted to positions where the whole tile fits in the slice.
pub fn sample_training_tiles(
    channels: &[&Image2D],
    labels: &Mask2D,
    weights: &WeightMap,
    cfg: &TileSampling,
    seed: u64,
) -> Result<Vec<SampledTile>> {
    let (w, h) = labels.dims();
    if cfg.tile == 0 || w < cfg.tile || h < cfg.tile {
        return Err(Error::param("tile", "slice is smaller than the tile extent"));
    }
    if weights.dims() != (w, h) || channels.iter().any(|c| c.dims() != (w, h)) {
        return Err(Error::shape((w, h), weights.dims()));
    }
    let input = TensorGrid::from_images(channels)?;
    let density = label_density(labels, cfg.density_sigma)?;
    let half = cfg.tile / 2;
    let (cols, rows) = (w - cfg.tile + 1, h - cfg.tile + 1);
    let mut dense_w = Vec::with_capacity(cols * rows);
    for y in 0..rows {
        for x in 0..cols {
            dense_w.push(density.get(x + half, y + half).max(0.0));
        }
    }
    let peak = dense_w.iter().cloned().fold(0.0, f64::max);
    let sparse_w: Vec<f64> = dense_w.iter().map(|d| peak - d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = draw_centers(&dense_w, cfg.n_dense, cols, &mut rng);
    let sparse = draw_centers(&sparse_w, cfg.n_sparse, cols, &mut rng);
    let flags = vec![true; dense.len()].into_iter().chain(vec![false; sparse.len()]);
    let mut out = Vec::with_capacity(dense.len() + sparse.len());
    for ((x0, y0), is_dense) in dense.into_iter().chain(sparse).zip(flags) {
        let t = cfg.tile;
        let sample = TrainingSample::new(
            input.crop(y0, x0, t, t)?,
            labels.crop(x0, y0, t, t)?,
            weights.crop(x0, y0, t, t)?,
        )?;
        out.push(SampledTile {
            origin: (x0, y0),
            center: (x0 + half, y0 + half),
            dense: is_dense,
            sample,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_labels_give_background_tiles() {
        let (w, h) = (120, 100);
        let img = Image2D::filled(w, h, 3.0);
        let labels = Mask2D::empty(w, h);
        let cfg = TileSampling {
            tile: 40,
            density_sigma: 6.0,
            ..Default::default()
        };
        let tiles = sample_training_tiles(&[&img, &img], &labels, &WeightMap::uniform(w, h), &cfg, 1).unwrap();
        assert_eq!(tiles.len(), 20);
        assert!(tiles.iter().all(|t| t.sample.label.count() == 0));
        assert_eq!(tiles.iter().filter(|t| t.dense).count(), 10);
        assert_eq!(tiles[0].sample.input.channels(), 2);
    }

    #[test]
    fn fixed_seed_fixed_tiles() {
        let labels = Mask2D::from_fn(90, 90, |x, y| (x / 10 + y / 10) % 3 == 0);
        let img = labels.to_image();
        let cfg = TileSampling {
            tile: 30,
            density_sigma: 5.0,
            ..Default::default()
        };
        let a = sample_training_tiles(&[&img], &labels, &WeightMap::uniform(90, 90), &cfg, 5).unwrap();
        let b = sample_training_tiles(&[&img], &labels, &WeightMap::uniform(90, 90), &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_slice_is_rejected() {
        let img = Image2D::zeros(50, 50);
        let r = sample_training_tiles(&[&img], &Mask2D::empty(50, 50), &WeightMap::uniform(50, 50), &Default::default(), 0);
        assert!(r.is_err());
    }

    #[test]
    fn dense_tiles_concentrate_on_a_cluster() {
        let (w, h, sigma) = (300usize, 300usize, 20.0);
        let (cx, cy) = (190usize, 120usize);
        let labels = Mask2D::from_fn(w, h, |x, y| x.abs_diff(cx) <= 2 && y.abs_diff(cy) <= 2);
        let img = labels.to_image();
        let cfg = TileSampling {
            tile: 60,
            density_sigma: sigma,
            ..Default::default()
        };
        let mut near = 0usize;
        let mut far_sparse = 0usize;
        for seed in 0..100 {
            let tiles = sample_training_tiles(&[&img], &labels, &WeightMap::uniform(w, h), &cfg, seed).unwrap();
            for t in &tiles {
                let d = libm::hypot(t.center.0 as f64 - cx as f64, t.center.1 as f64 - cy as f64);
                if t.dense && d <= 2.0 * sigma {
                    near += 1;
                }
                if !t.dense && d > 2.0 * sigma {
                    far_sparse += 1;
                }
            }
        }
        assert!(near as f64 / 1000.0 >= 0.8, "{near}");
        assert!(far_sparse as f64 / 1000.0 >= 0.8, "{far_sparse}");
    }
}
