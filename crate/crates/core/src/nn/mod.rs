//! Tensor engine: convolution kernels, tape-based reverse-mode
//! differentiation, layers and the optimizer.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use conv::{conv2d_forward, conv2d_transpose_forward, conv2d_weight_grad, ConvGeometry, ConvSpec};
pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use optim::{clip_grad_norm, cosine_lr, sgd_momentum_step, TrainHyper};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{accuracy, BnStats, Tape, Var, BN_EPS, BN_MOMENTUM};
