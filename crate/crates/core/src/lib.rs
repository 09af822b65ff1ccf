pub mod autodiff;
pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod global_attention;
pub mod gradcheck;
pub mod head;
pub mod local_context;
pub mod model;
pub mod params;
pub mod runner;
pub mod synth;
pub mod tensor;

pub use autodiff::{Activation, Binary, Graph, Var};
pub use error::{Error, Result};
pub use params::Params;
pub use tensor::{Element, Tensor};
