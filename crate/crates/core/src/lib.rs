//! Neural style transfer with explicit per-style convolution filter banks.
//!
//! An encoder maps images to a feature space, a bank of style-specific
//! kernels convolves those features, and a decoder maps them back. Styles can
//! be mixed by blending kernels or by assigning kernels to feature regions.

pub mod adam;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod image_io;
mod kernels;
pub mod loss;
pub mod net;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::{autoencoder_digest, load_model, save_model, Container};
pub use error::{Error, Result};
pub use image_io::ImageBuffer;
pub use loss::{
    content_loss, identity_loss, perceptual_loss, style_loss, FeatureExtractor, FeaturePyramid, LossWeights, PerceptualLoss,
    PyramidVars, StyleGrams,
};
pub use net::{
    apply_bank, fuse_linear, reduce_labels, FilterBank, FusedBank, ModelConfig, RegionMaskSet, StyleBankModel,
    FEATURE_STRIDE,
};
pub use tensor::{Dims, Padding, Real, Tensor};
pub use train::{
    add_style_incremental, train, Batch, Dataset, GradientSnapshot, LrSchedule, MetricsRow, TrainConfig, TrainOutput, Trainer,
};
