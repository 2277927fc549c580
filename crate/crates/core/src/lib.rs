pub mod error;
pub mod numcore;
pub mod solver;
pub mod adjoint;
pub mod control;
pub mod data;
pub mod fwp;
pub mod logsig;
pub mod par;
pub mod train;

pub use error::{Error, Result};
