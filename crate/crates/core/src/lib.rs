pub mod ansatz;
pub mod classical;
pub mod data;
pub mod error;
pub mod evidence;
pub mod exec;
pub mod fusion;
pub mod gates;
pub mod grad;
pub mod harness;
pub mod model;
pub mod qcnn;
pub mod qtensor;

pub use error::{QcmmError, Result};
