pub mod bench;
pub mod cmsa;
pub mod error;
pub mod io;
pub mod loss;
pub mod network;
pub mod params;
pub mod scan_path;
pub mod ssm;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, LinearMap, Real, Tensor};
