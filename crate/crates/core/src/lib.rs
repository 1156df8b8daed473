pub mod covest;
pub mod deconv;
pub mod downstream;
pub mod error;
pub mod gls;
pub mod linalg;
pub mod qp;
pub mod simgen;

pub use error::{Error, Result};
