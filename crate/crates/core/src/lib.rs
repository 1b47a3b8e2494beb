pub mod autodiff;
pub mod error;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, ErrorKind, Result};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
pub mod gradcheck;
pub mod nn;
pub mod anfl;
pub mod mefl;
pub mod gated_gcn;
pub mod losses;
pub mod codec;
pub mod config;
pub mod data;
pub mod optim;
pub mod model;
pub mod metrics;
pub mod trainer;
pub mod ablation;
pub mod gradcheck_suite;
pub mod cli;
