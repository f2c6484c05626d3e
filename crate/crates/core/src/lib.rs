pub mod attention;
pub mod cli;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod retinex;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use network::{init_parameters, ModelConfig};
pub use params::{Bound, ParameterStore};
pub use retinex::{orf_forward, OrfMode};
pub use tensor::{Real, Tensor};
