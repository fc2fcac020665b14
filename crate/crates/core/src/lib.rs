pub mod env;
pub mod error;
pub mod foothold;
pub mod harness;
pub mod rl;
pub mod sensors;
pub mod sim;
pub mod terrain;

pub use error::{Error, Result};
