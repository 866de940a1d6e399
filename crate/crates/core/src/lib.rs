//! Coronary-artery segmentation engine: tensors with reverse-mode
//! differentiation, nested U-shaped networks, the hybrid loss, Otsu
//! post-processing, evaluation metrics, synthetic data and training.

pub mod arch;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod postproc;
pub mod tensor;
pub mod train;

pub use arch::{ArchConfig, ArchKind, Mode, Network};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossConfig};
pub use metrics::{BinaryMask, Spacing};
pub use postproc::ProbabilityMap;
pub use tensor::{GradTape, Real, Tensor};
