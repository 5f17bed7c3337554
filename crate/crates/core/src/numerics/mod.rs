//! Dense tensor substrate shared by both branches.

mod conv;
mod label;
mod median;
mod regions;
mod tensor;

pub use conv::{conv2d, conv2d_transpose, kernel_gradient};
pub use label::{box_blur3, gaussian_blur, gaussian_label};
pub use median::median_filter_1d;
pub use regions::{connected_components, min_bounding_rect};
pub use tensor::{
    running_mean, BBox, BinaryMask, ConvKernel, FeatureMap, KernelShape, Pixel, ScoreMap,
};
