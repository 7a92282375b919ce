pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod label;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod pairing;
pub mod tensor;

pub use error::{ConrError, Result};
