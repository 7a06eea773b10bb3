pub mod adjoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod forward;
pub mod mesh;
pub mod model;
pub mod optimize;
pub mod stabilize;
pub mod verify;

pub use error::{Error, Result};
