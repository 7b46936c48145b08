//! Weighted logistic regression loss.

use super::tensor::TensorGrid;
use super::weights::WeightMap;
use crate::error::{Error, Result};
use crate::image::Mask2D;
use crate::math;

pub const PROB_CLAMP: f64 = 1e-12;

/// `-Σ w [y ln p + (1 - y) ln(1 - p)] / Σ w` and its gradient with respect
/// to the pre-sigmoid logits, `w (p - y) / Σ w`. Probabilities are clamped
/// to `[1e-12, 1 - 1e-12]` inside the logarithms. An all-zero weight map
/// yields zero loss and zero gradient.
pub fn weighted_logistic_loss(pred: &TensorGrid, label: &Mask2D, weights: &WeightMap) -> Result<(f64, TensorGrid)> {
    let (c, h, w) = pred.shape();
    if c != 1 {
        return Err(Error::ChannelMismatch {
            expected: "1 prediction channel".into(),
            found: alloc::format!("{c}"),
        });
    }
    if label.dims() != (w, h) || weights.dims() != (w, h) {
        return Err(Error::shape((w, h), (label.dims(), weights.dims())));
    }
    let wsum: f64 = weights.image().sum();
    let mut grad = TensorGrid::zeros(1, h, w);
    if wsum == 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let wd = weights.image().data();
    for (i, (&p, g)) in pred.data().iter().zip(grad.data_mut()).enumerate() {
        let wi = wd[i];
        if wi == 0.0 {
            continue;
        }
        let y = if label.data()[i] { 1.0 } else { 0.0 };
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= wi * (y * math::ln(pc) + (1.0 - y) * math::ln(1.0 - pc));
        *g = wi * (p - y) / wsum;
    }
    Ok((loss / wsum, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image2D;
    use crate::nnseg::layers::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(v: &[f64], w: usize) -> TensorGrid {
        TensorGrid::from_vec(1, v.len() / w, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let label = Mask2D::from_fn(3, 2, |x, _| x == 1);
        let p = grid(&[0.0, 1.0, 0.0, 0.0, 1.0, 0.0], 3);
        let (l, _) = weighted_logistic_loss(&p, &label, &WeightMap::uniform(3, 2)).unwrap();
        assert!(l < 1e-11);
    }

    #[test]
    fn uniform_weights_give_mean_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: alloc::vec::Vec<f64> = (0..40).map(|_| rng.random_range(0.01..0.99)).collect();
        let label = Mask2D::from_fn(8, 5, |x, y| (x * 3 + y) % 4 == 0);
        let (l, _) = weighted_logistic_loss(&grid(&p, 8), &label, &WeightMap::uniform(8, 5)).unwrap();
        let mean: f64 = p
            .iter()
            .zip(label.data())
            .map(|(&p, &y)| if y { -libm::log(p) } else { -libm::log(1.0 - p) })
            .sum::<f64>()
            / 40.0;
        assert!((l - mean).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: alloc::vec::Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let wts = Image2D::from_fn(6, 5, |x, y| ((x + 2 * y) % 5) as f64);
        let wts = WeightMap::new(wts).unwrap();
        let label = Mask2D::from_fn(6, 5, |x, y| (x + y) % 3 == 0);
        let loss_at = |z: &[f64]| {
            let p: alloc::vec::Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            weighted_logistic_loss(&grid(&p, 6), &label, &wts).unwrap()
        };
        let (_, g) = loss_at(&z);
        for i in 0..z.len() {
            let h = 1e-6;
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (loss_at(&zp).0 - loss_at(&zm).0) / (2.0 * h);
            let a = g.data()[i];
            assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-4), "{i}: {a} {fd}");
        }
    }

    #[test]
    fn scaling_weights_changes_nothing() {
        let p = grid(&[0.2, 0.7, 0.4, 0.9], 2);
        let label = Mask2D::from_fn(2, 2, |x, _| x == 0);
        let w = WeightMap::new(Image2D::from_vec(2, 2, alloc::vec![1.0, 3.0, 0.0, 8.0]).unwrap()).unwrap();
        let (l1, g1) = weighted_logistic_loss(&p, &label, &w).unwrap();
        let (l2, g2) = weighted_logistic_loss(&p, &label, &w.scaled(37.5).unwrap()).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g1.data()[2], 0.0);
    }

    #[test]
    fn zero_weights_and_clamping() {
        let p = grid(&[0.0, 1.0], 2);
        let label = Mask2D::from_fn(2, 1, |x, _| x == 0);
        let (l, g) = weighted_logistic_loss(&p, &label, &WeightMap::new(Image2D::zeros(2, 1)).unwrap()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let (l, _) = weighted_logistic_loss(&p, &label, &WeightMap::uniform(2, 1)).unwrap();
        assert!(l.is_finite() && l > 20.0);
    }
}
