//! Glue between stacks on disk and the U-Net: input scaling, per-slice
//! prediction and training-set assembly.

use marmopipe_core::image::{Image2D, Mask2D, Stack3D};
use marmopipe_core::injsite::CellPointCloud;
use marmopipe_core::nnseg::{
    build_cell_weight_map, build_tracer_weight_map, sample_training_tiles, sliding_window_predict, train,
    AugmentConfig, CellWeightParams, NetworkParams, TileSampling, TrainConfig, TrainOutcome, TrainingSample,
    UNetConfig,
};
use marmopipe_core::nnseg::weights::{DEFAULT_NEGATIVE_WEIGHT, DEFAULT_TRACER_WEIGHT};
use marmopipe_core::{Error, Result};

/// Raw 16-bit intensities are multiplied by this before entering the network.
pub const INPUT_SCALE: f64 = 1.0 / 1000.0;

pub fn scale_input(img: &Image2D) -> Image2D {
    img.map(|v| v * INPUT_SCALE)
}

/// Saliency of one slice from unscaled channel images.
pub fn predict_slice(params: &NetworkParams, channels: &[&Image2D], input_extent: usize) -> Result<Image2D> {
    if channels.len() != params.config.in_channels {
        return Err(Error::param(
            "channels",
            format!("model expects {} input channels, got {}", params.config.in_channels, channels.len()),
        ));
    }
    let scaled: Vec<Image2D> = channels.iter().map(|c| scale_input(c)).collect();
    let refs: Vec<&Image2D> = scaled.iter().collect();
    Ok(sliding_window_predict(params, &refs, input_extent)?.into_image())
}

/// Settings shared by both training commands.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub depth: usize,
    pub base_features: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub input_extent: usize,
    pub tiles_per_slice: usize,
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            depth: 2,
            base_features: 8,
            steps: 500,
            learning_rate: 0.01,
            seed: 0,
            input_extent: 108,
            tiles_per_slice: 4,
            augment: false,
        }
    }
}

fn train_config(o: &TrainOptions) -> TrainConfig {
    let mut c = TrainConfig::new(o.steps, o.learning_rate, o.seed);
    c.input_extent = o.input_extent;
    c.augment = o.augment.then(AugmentConfig::default);
    c
}

fn sampling(o: &TrainOptions) -> TileSampling {
    TileSampling {
        n_dense: o.tiles_per_slice.div_ceil(2),
        n_sparse: o.tiles_per_slice / 2,
        tile: o.input_extent,
        ..TileSampling::default()
    }
}

fn slice_seed(seed: u64, z: usize) -> u64 {
    marmopipe_core::evalsynth::derive_seed(seed, &[z as u64])
}

/// One-pixel labels at the annotated cell centers of slice `z`.
pub fn cell_label_slice(cells: &CellPointCloud, z: usize, w: usize, h: usize) -> Mask2D {
    let mut m = Mask2D::empty(w, h);
    for c in cells.points.iter().filter(|c| c.z == z && c.x < w && c.y < h) {
        m.set(c.x, c.y, true);
    }
    m
}

/// Training tiles from every slice of `cb` holding at least one annotated cell.
pub fn cell_samples(
    cb: &Stack3D,
    cells: &CellPointCloud,
    weighting: &CellWeightParams,
    o: &TrainOptions,
) -> Result<Vec<TrainingSample>> {
    let [w, h, nz] = cb.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        let labels = cell_label_slice(cells, z, w, h);
        if labels.count() == 0 {
            continue;
        }
        let slice = cb.slice(z);
        let weights = build_cell_weight_map(&labels, &slice, weighting)?;
        let scaled = scale_input(&slice);
        let tiles = sample_training_tiles(&[&scaled], &labels, &weights, &sampling(o), slice_seed(o.seed, z))?;
        out.extend(tiles.into_iter().map(|t| t.sample));
    }
    if out.is_empty() {
        return Err(Error::Empty("annotated cells"));
    }
    Ok(out)
}

/// Training tiles from every slice of the tracer label stack with a positive pixel.
pub fn tracer_samples(cg: &Stack3D, cr: &Stack3D, labels: &Stack3D, o: &TrainOptions) -> Result<Vec<TrainingSample>> {
    let [w, h, nz] = cg.dims();
    if cr.dims() != cg.dims() || labels.dims() != cg.dims() {
        return Err(Error::shape(cg.dims(), if cr.dims() != cg.dims() { cr.dims() } else { labels.dims() }));
    }
    let mut out = Vec::new();
    for z in 0..nz {
        let lab = Mask2D::threshold(&labels.slice(z), 0.0);
        if lab.count() == 0 {
            continue;
        }
        debug_assert_eq!(lab.dims(), (w, h));
        let weights = build_tracer_weight_map(&lab, None, DEFAULT_TRACER_WEIGHT, DEFAULT_NEGATIVE_WEIGHT)?;
        let (g, r) = (scale_input(&cg.slice(z)), scale_input(&cr.slice(z)));
        let tiles = sample_training_tiles(&[&g, &r], &lab, &weights, &sampling(o), slice_seed(o.seed, z))?;
        out.extend(tiles.into_iter().map(|t| t.sample));
    }
    if out.is_empty() {
        return Err(Error::Empty("tracer labels"));
    }
    Ok(out)
}

/// Fresh network trained on `samples`.
pub fn train_network(samples: &[TrainingSample], in_channels: usize, o: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = UNetConfig::new(o.depth, o.base_features, in_channels);
    let params = NetworkParams::init(cfg, o.seed)?;
    train(params, samples, &train_config(o))
}
