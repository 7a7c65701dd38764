pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod dpc;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod synth;
mod params;
pub mod tensor;

pub use autodiff::{finite_diff_check, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
