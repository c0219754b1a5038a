pub mod checks;
pub mod data;
pub mod error;
pub mod fmt;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use ops::{BinaryKind, ReduceMode};
pub use rng::Rng;
pub use tape::{Op, Tape, Var};
pub use tensor::Tensor;
