//! Sparse training with gradual magnitude pruning at several granularities,
//! plus compressed storage and FGSM robustness evaluation.

pub mod adversarial;
pub mod compressed;
pub mod container;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use schedule::{Granularity, Phase, PruningSchedule};
pub use tensor::{ConvDims, ConvWeight, FcWeight, PruneMask};
