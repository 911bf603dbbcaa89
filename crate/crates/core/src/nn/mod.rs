//! Thin neural-network toolkit on top of `candle`: seeded parameter storage,
//! checkpoints, the handful of layers the models need, and optimizers.

mod checkpoint;
mod conv;
mod layers;
mod norm;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, TensorEntry};
pub use conv::conv2d;
pub use layers::{
    adain, global_avg_pool, instance_norm, leaky_relu, softmax_channels, upsample_nearest, Conv2d,
    Linear, Norm, ResBlock, INSTANCE_NORM_EPS,
};
pub use norm::instance_norm_op;
pub use optim::{MomentumSgd, OptimizerConfig, OptimizerKind, TrainOptimizer};
pub use params::{Init, ParamStore};

pub use candle_core::{DType, Tensor, Var};

use candle_core::Device;

/// Precision of training and inference.
pub const DEFAULT_DTYPE: DType = DType::F32;

/// All computation runs on the CPU.
pub fn device() -> Device {
    Device::Cpu
}
