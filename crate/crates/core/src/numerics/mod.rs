//! Dense arrays, reverse-mode differentiation and finite-difference checking.

mod array;
pub mod gradcheck;
pub mod ops;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_coords, grad_check_param, grad_check_recorded, GradCheckReport};
pub use params::{Graph, Init, ParamSpec, ParamStore};
pub use tape::{Broadcast, Gradients, Tape, Unary, Var};
