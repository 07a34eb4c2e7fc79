//! Low-dose CT denoising with a channel-attention U-Net trained jointly with
//! an anatomical contrastive network.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod esau;
pub mod imaging;
pub mod interpret;
pub mod kernels;
pub mod losses;
pub mod mac;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use dataset::SlicePair;
pub use error::{Error, Result};
pub use esau::{EsauConfig, EsauNet};
pub use imaging::{Mask, NormalizedImage, PhantomSpec, Slice};
pub use interpret::{Clustering, LabelMap};
pub use losses::{FeatureMap, LossWeights, SampleSets};
pub use mac::{MacConfig, MacNet, MacNetState};
pub use metrics::MetricReport;
pub use tensor::Tensor;
pub use trainer::{StepReport, TrainConfig, TrainState};
