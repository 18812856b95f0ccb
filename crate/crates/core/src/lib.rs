pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod moco;
pub mod optim;
pub mod skeleton;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{Precision, TrainConfig};
pub use error::{Error, Result};
pub use skeleton::{Modality, SkeletonSequence, SkeletonTopology};
pub use tensor::{Real, Tensor};
