//! Core library of the universal-quantization codec: the dithered channel,
//! soft rounding, per-channel density models, a conditional range coder, a
//! minimal reverse-mode autodiff engine with expected-gradient hooks, and the
//! linear block-transform model built on top of them.

pub mod autodiff;
pub mod bitstream;
pub mod channel;
pub mod codec;
pub mod coder;
pub mod density;
pub mod diagnostics;
pub mod model;
pub mod softround;
pub mod stats;
pub mod tensor;
pub mod train;

pub use channel::{DitherStream, LatticeKind, LatticeSpec, ScaleMixtureSpec};
pub use codec::ImageF;
pub use density::{DensityConfig, EvalDensity, FactorizedDensity};
pub use model::{CodecMode, LinearModel, RdConfig};
pub use softround::AlphaSchedule;
pub use tensor::Tensor;
