//! Class-guided camouflaged object detection at desk scale.

pub mod cgd;
pub mod checkpoint;
pub mod config;
pub mod cpg;
pub mod csg;
pub mod dataset;
pub mod encoders;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result, ValidationKind};
pub use model::{CgNet, FeatureBundle};
pub use param::{Init, ParamBuilder, Parameter};
pub use tensor::Tensor;
