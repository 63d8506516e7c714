//! A small dense neural-network engine in double precision with explicit
//! forward/backward passes.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, Objective, SignFlipped};
pub use layers::Mode;
pub use lstm::LstmState;
pub use model::{ArchSpec, EvaluationNet, PredictionNet};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamGroup, ParamStore};
pub use tensor::Tensor;
