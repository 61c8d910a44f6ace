#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod ddim;
pub mod depthsel;
pub mod error;
pub mod exec;
pub mod io;
pub mod mvcam;
pub mod pipeline;
pub mod rig;
pub mod rsactrl;
pub mod so3;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
