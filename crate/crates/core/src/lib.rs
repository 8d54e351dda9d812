//! Blind image quality assessment with staircase feature fusion and
//! iterative mixed database training.
//!
//! The crate is generic over the scalar type; the `*64` aliases below pin
//! the 64-bit instantiation used by the trainer and the CLI.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{BackboneConfig, ModelConfig, ScoreScale, StageSpec, StaircaseModel};
pub use optim::{adam_step, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = StaircaseModel<f64>;
pub type Model32 = StaircaseModel<f32>;
