pub mod error;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Shape, Tensor};
pub mod autograd;
pub use autograd::{Graph, Var};
pub mod optim;
pub mod param;
pub use param::{Binder, ParamKind, ParamStore, Parameter};
pub mod cfblock;
pub mod model;
pub mod teacher;
pub mod alignment;
pub mod gradcheck;
pub mod harness;
pub mod io;
