pub mod augment;
pub mod config;
pub mod autodiff;
pub mod contrast;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod real;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use real::{DType, Real};
pub use rng::{Purpose, RngStream};
pub use tensor::Tensor;
