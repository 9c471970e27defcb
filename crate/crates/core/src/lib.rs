pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rna_select;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
