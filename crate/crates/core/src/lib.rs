pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod par;
pub mod params;
pub mod profiling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
