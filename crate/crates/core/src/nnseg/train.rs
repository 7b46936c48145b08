//! Training samples and plain stochastic gradient descent.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_with, AugmentConfig};
use super::loss::weighted_logistic_loss;
use super::tensor::TensorGrid;
use super::unet::{Mode, NetworkParams};
use super::weights::WeightMap;
use crate::error::{Error, Result};
use crate::image::Mask2D;

/// Network input with a binary label and loss weights at the same extent.
/// Label and weights are center-cropped to the network output for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: TensorGrid,
    pub label: Mask2D,
    pub weights: WeightMap,
}

impl TrainingSample {
    pub fn new(input: TensorGrid, label: Mask2D, weights: WeightMap) -> Result<Self> {
        let dims = (input.width(), input.height());
        if label.dims() != dims || weights.dims() != dims {
            return Err(Error::shape(dims, (label.dims(), weights.dims())));
        }
        Ok(TrainingSample { input, label, weights })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.input.width(), self.input.height())
    }

    /// Centered `w × h` window of input, label and weights.
    pub fn center_crop(&self, w: usize, h: usize) -> Result<TrainingSample> {
        let (sw, sh) = self.extent();
        if w > sw || h > sh {
            return Err(Error::param("crop", "window exceeds sample extent"));
        }
        let (x0, y0) = ((sw - w) / 2, (sh - h) / 2);
        TrainingSample::new(
            self.input.crop(y0, x0, h, w)?,
            self.label.crop(x0, y0, w, h)?,
            self.weights.crop(x0, y0, w, h)?,
        )
    }

    /// Label and weights cropped to a `w × h` output.
    pub fn targets(&self, w: usize, h: usize) -> Result<(Mask2D, WeightMap)> {
        let c = self.center_crop(w, h)?;
        Ok((c.label, c.weights))
    }
}

/// Loss of the network on one sample in inference mode.
pub fn sample_loss(params: &NetworkParams, sample: &TrainingSample) -> Result<f64> {
    let pred = params.predict(&sample.input)?;
    let (label, weights) = sample.targets(pred.width(), pred.height())?;
    Ok(weighted_logistic_loss(&pred, &label, &weights)?.0)
}

/// Mean inference-mode loss over a sample set.
pub fn mean_loss(params: &NetworkParams, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(params, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// One forward/backward pass; returns the loss and the gradients.
pub fn loss_and_gradients(
    params: &NetworkParams,
    sample: &TrainingSample,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, NetworkParams, super::unet::ForwardPass)> {
    let pass = params.forward(&sample.input, Mode::Train(rng))?;
    let (label, weights) = sample.targets(pass.prob.width(), pass.prob.height())?;
    let (loss, grad) = weighted_logistic_loss(&pass.prob, &label, &weights)?;
    let grads = params.backward(&pass, &grad)?;
    Ok((loss, grads, pass))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random augmentation of each drawn sample, cropped to `input_extent`.
    pub augment: Option<AugmentConfig>,
    pub input_extent: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            steps,
            learning_rate,
            seed,
            augment: None,
            input_extent: super::unet::DEFAULT_INPUT_EXTENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Training-mode loss of the sample used at each step.
    pub loss_history: Vec<f64>,
}

/// Batch-size-one SGD. Samples are visited in epochs, each a seeded
/// permutation; the same seed reproduces the run bit for bit.
pub fn train(mut params: NetworkParams, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::param("learning_rate", "must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut last_finite = f64::NAN;
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let drawn;
        let sample = match &cfg.augment {
            Some(a) => {
                let params_a = a.draw(cfg.input_extent, &mut rng)?;
                drawn = augment_with(&samples[idx], cfg.input_extent, &params_a)?;
                &drawn
            }
            None => &samples[idx],
        };
        let (loss, grads, pass) = loss_and_gradients(&params, sample, &mut rng)?;
        if !loss.is_finite() || grads.trainable().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss;
        history.push(loss);
        params.update_running_stats(&pass);
        params.sgd_step(&grads, cfg.learning_rate)?;
        if params.trainable().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step,
                last_finite_loss: last_finite,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image2D;
    use crate::nnseg::unet::UNetConfig;

    fn toy_samples() -> Vec<TrainingSample> {
        (0..3)
            .map(|k| {
                let img = Image2D::from_fn(44, 44, |x, y| if (x + y + k) % 7 < 2 { 1.0 } else { 0.0 });
                let label = Mask2D::threshold(&img, 0.5);
                TrainingSample::new(TensorGrid::from_images(&[&img]).unwrap(), label, WeightMap::uniform(44, 44))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = NetworkParams::init(UNetConfig::new(2, 2, 1), 3).unwrap();
        let out = train(p.clone(), &toy_samples(), &TrainConfig::new(4, 0.0, 1)).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.loss_history.len(), 4);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = NetworkParams::init(UNetConfig::new(2, 2, 1), 3).unwrap();
        let cfg = TrainConfig::new(6, 0.05, 17);
        let a = train(p.clone(), &toy_samples(), &cfg).unwrap();
        let b = train(p, &toy_samples(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_toy_problem() {
        let p = NetworkParams::init(UNetConfig::new(2, 4, 1), 3).unwrap();
        let s = toy_samples();
        let before = mean_loss(&p, &s).unwrap();
        let out = train(p, &s, &TrainConfig::new(60, 0.1, 2)).unwrap();
        assert!(mean_loss(&out.params, &s).unwrap() < 0.5 * before);
    }

    #[test]
    fn divergence_is_reported() {
        let p = NetworkParams::init(UNetConfig::new(2, 2, 1), 3).unwrap();
        let err = train(p, &toy_samples(), &TrainConfig::new(50, 1e300, 2)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn empty_sample_set_is_rejected() {
        let p = NetworkParams::init(UNetConfig::new(2, 2, 1), 3).unwrap();
        assert!(train(p, &[], &TrainConfig::new(1, 0.1, 0)).is_err());
    }

    #[test]
    fn frozen_region_contributes_nothing() {
        let p = NetworkParams::init(UNetConfig::new(2, 2, 1), 4).unwrap();
        let mut s = toy_samples().remove(0);
        s.weights = WeightMap::new(Image2D::zeros(44, 44)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, g, _) = loss_and_gradients(&p, &s, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.trainable().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }
}
