//! Tile stream for flat-field estimation: Poisson background whose rate is
//! `lambda` times the mean-normalized vignette, with a fraction of pixels
//! replaced by dark or saturated outliers.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::derive_seed;
use super::phantom::raised_cosine_vignette;
use crate::error::{Error, Result};
use crate::image::{Channel, Image2D, Tile2D};

#[derive(Debug, Clone)]
pub struct FlatFieldPhantom {
    pub width: usize,
    pub height: usize,
    pub tiles: usize,
    pub lambda: f64,
    pub vignette_corner: f64,
    /// Probability that a pixel is replaced by an outlier.
    pub outlier_fraction: f64,
    pub seed: u64,
    vignette: Image2D,
    dists: Vec<Poisson<f64>>,
}

impl FlatFieldPhantom {
    pub fn new(
        width: usize,
        height: usize,
        tiles: usize,
        lambda: f64,
        vignette_corner: f64,
        outlier_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::param("lambda", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&outlier_fraction) {
            return Err(Error::param("outlier_fraction", "must lie in [0, 1]"));
        }
        let vignette = raised_cosine_vignette(width, height, vignette_corner)?;
        let mean = vignette.sum() / vignette.data().len() as f64;
        let dists = vignette
            .data()
            .iter()
            .map(|&v| Poisson::new(lambda * v / mean).map_err(|_| Error::param("lambda", "invalid Poisson rate")))
            .collect::<Result<_>>()?;
        Ok(FlatFieldPhantom {
            width,
            height,
            tiles,
            lambda,
            vignette_corner,
            outlier_fraction,
            seed,
            vignette,
            dists,
        })
    }

    /// The generating field, peak 1.
    pub fn vignette(&self) -> &Image2D {
        &self.vignette
    }

    /// The generating field divided by its mean.
    pub fn normalized_vignette(&self) -> Image2D {
        let m = self.vignette.sum() / self.vignette.data().len() as f64;
        self.vignette.map(|v| v / m)
    }

    /// Tile `k`; independent of which other tiles were rendered.
    pub fn tile(&self, k: usize) -> Tile2D {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[k as u64]));
        let px = self
            .dists
            .iter()
            .map(|d| {
                let v: f64 = d.sample(&mut rng);
                if self.outlier_fraction > 0.0 && rng.random::<f64>() < self.outlier_fraction {
                    if rng.random::<bool>() {
                        0
                    } else {
                        rng.random_range(3000..=65535)
                    }
                } else {
                    v.min(65535.0) as u16
                }
            })
            .collect();
        Tile2D::new(self.width, self.height, px, Channel::Red, [0.0; 3], k as u32, 1.0)
            .expect("extent validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_are_reproducible_and_distinct() {
        let p = FlatFieldPhantom::new(16, 12, 3, 80.0, 0.6, 0.01, 5).unwrap();
        assert_eq!(p.tile(1), p.tile(1));
        assert_ne!(p.tile(0).pixels(), p.tile(1).pixels());
        let m = p.normalized_vignette();
        assert!((m.sum() / m.data().len() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tile_mean_is_lambda() {
        let p = FlatFieldPhantom::new(200, 200, 1, 80.0, 0.6, 0.0, 3).unwrap();
        let t = p.tile(0);
        let mean = t.pixels().iter().map(|&v| f64::from(v)).sum::<f64>() / t.pixels().len() as f64;
        assert!((mean - 80.0).abs() < 0.5, "{mean}");
    }
}
