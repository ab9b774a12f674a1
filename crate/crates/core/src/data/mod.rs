//! Images, priors, masks and datasets.

pub mod canny;
pub mod dataset;
pub mod image;
pub mod inputs;
pub mod mask;
pub mod prior;
pub mod rtv;
pub mod synth;

pub use canny::{canny_edge, CannyParams};
pub use dataset::{load_resized, Dataset, Source};
pub use image::{save_gray_png, to_gray, EdgeMap, GrayImage, RgbImage, SmoothedImage};
pub use inputs::{assemble_inputs, build_inputs, Batch, ModelInputs, PrepParams, Sample};
pub use mask::{far_margin, generate_irregular_mask, BorderMode, Mask, MaskBucket};
pub use prior::{structure_prior, PriorKind};
pub use rtv::{edge_preserving_smooth, total_variation, SmoothParams};
pub use synth::synth_image;
