//! Minimal neural-network engine with hand-written backward passes.

pub mod activation;
pub mod classifier;
pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod norm;
pub mod param;

pub use activation::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward};
pub use classifier::{Classifier, Mode, Pass};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub use dense::{dense_backward, dense_forward, Dense, DenseGrads};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use loss::{softmax, softmax_cross_entropy};
pub use mlp::{Mlp, MlpConfig};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, BnMode};
pub use param::{sgd_step, LayerParams, Param};
