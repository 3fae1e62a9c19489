//! Differentiable operator set and gradient contract: tensors, the recorded
//! graph, operator kernels, spectral normalization and a finite-difference
//! gradient checker.

pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod spectral;
pub mod tensor;

pub use batchnorm::{BatchNorm, BnCapture, BnMode};
pub use conv::{conv2d_3x3, global_avg_pool, max_pool2x, upsample_nearest_2x, Conv2d};
pub use gradcheck::grad_check;
pub use graph::{backward, Value};
pub use ops::{apply_operator, Linear, OpKind, OperatorState};
pub use spectral::{spectral_normalize, spectral_normalize_frozen, SpectralNormState};
pub use tensor::Tensor;
