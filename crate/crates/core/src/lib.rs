//! Desk-scale depth estimation from single images: dilated residual
//! convolutional networks with a log-space depth classification head,
//! trained and verified entirely on the CPU.
//!
//! The crate is generic over the scalar type ([`Scalar`]): `f64` is the
//! standard precision used by every verification suite, `f32` the compact
//! precision used for training.

pub mod depth;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use depth::{depth_to_label, hard_threshold, multinomial_loss, soft_weight_sum, softmax, BinSpec, LabelMap, ScoreMap};
pub use error::{Error, Result};
pub use metrics::{band_mass, compute_metrics, confusion, ConfusionMatrix, DepthMap, MetricsReport};
pub use net::{build_network, receptive_field, Mode, Network, NetworkConfig};
pub use ops::{BatchNorm, BnMode, ConvKernel, ConvSpec};
pub use scalar::{Precision, Scalar};
pub use tensor::{Shape4, Tensor4};

/// Compact-precision tensor (training default).
pub type Tensor4F = Tensor4<f32>;
/// Standard-precision tensor (verification default).
pub type Tensor4D = Tensor4<f64>;
/// Compact-precision network.
pub type NetworkF = Network<f32>;
/// Standard-precision network.
pub type NetworkD = Network<f64>;
