mod codec;
pub mod data;
pub mod error;
pub mod kernels;
mod layers;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub mod gradcheck;
pub mod gradsuite;
pub mod vit;
pub mod fusion;
pub mod loc;
pub mod sfpn;
pub mod head;
pub mod model;
pub mod geometry;
pub mod metrics;
pub mod par;
pub mod harness;
