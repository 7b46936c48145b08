//! Small U-Net segmentation backend, written from scratch.
//!
//! Valid (unpadded) 3×3 convolutions with ReLU, 2×2 max pooling, 2×2
//! transposed up-convolutions, center-cropped skip connections, a 1×1 output
//! convolution and a sigmoid. Used for cell-center saliency (input: `C_B`)
//! and tracer saliency (input: `C_R`, `C_G`).

pub mod augment;
pub mod layers;
pub mod loss;
pub mod sampling;
pub mod sliding;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod weights;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams};
pub use loss::weighted_logistic_loss;
pub use sampling::{sample_training_tiles, SampledTile, TileSampling};
pub use sliding::{sliding_window_predict, SlidingPlan};
pub use tensor::TensorGrid;
pub use train::{mean_loss, train, TrainConfig, TrainOutcome, TrainingSample};
pub use unet::{output_extent, valid_input_extent, Mode, NetworkParams, UNetConfig};
pub use weights::{build_cell_weight_map, build_tracer_weight_map, CellWeightParams, WeightMap};
