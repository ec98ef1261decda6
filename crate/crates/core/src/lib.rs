pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pmn;
pub mod runtime;
pub mod uld;

pub use error::{Error, Result};
pub use numerics::{Array, ParamStore};
