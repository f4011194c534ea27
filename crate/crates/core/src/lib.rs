//! Spectral space-time clustering for salient-object video segmentation.
//!
//! The leading eigenvector of a pixel-level space-time affinity matrix is
//! computed by power iteration, with each matrix product carried out as a few
//! separable 3D Gaussian convolutions instead of an explicit sparse matrix.
//!
//! - [`volume`]: dense video volumes, VVF and PGM I/O.
//! - [`gaussian3d`]: separable and direct 3D Gaussian filtering.
//! - [`spectral`]: the filtering power iteration, offline and online drivers.
//! - [`oracle`]: explicit matrices and exact eigenvectors for small inputs.
//! - [`learn`]: channel-weight training with a Focal-Dice loss.
//! - [`metrics`]: per-frame IoU and the TCONT temporal-consistency score.
//! - [`synth`]: synthetic videos and noise injectors.
//! - [`cli`]: the `sfseg` command-line front end.

pub mod cli;
pub mod error;
pub mod gaussian3d;
pub mod learn;
pub mod metrics;
pub mod oracle;
pub mod spectral;
pub mod synth;
pub mod volume;

pub use error::{Result, SfsegError};
pub use gaussian3d::{build_kernel_1d, convolve_direct, convolve_separable, GaussianKernelSpec};
pub use oracle::{angle_degrees, build_matrix, leading_eigenvector, ExplicitGraph, KernelKind};
pub use spectral::{
    combine_channels, normalize_l2, power_iteration_step, segment_offline, segment_online,
    soft_binarize, ChannelWeights, SpectralConfig,
};
pub use volume::{ChannelStack, FlowField, Shape, VideoVolume};
