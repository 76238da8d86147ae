pub mod attack;
pub mod cli;
pub mod defense;
pub mod driver;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod linalg;
pub(crate) mod network;
pub mod opf;
pub mod powerflow;
pub mod third_stage;
pub mod implicit_grad;

pub use error::{Error, Result};
