pub mod adapter;
pub mod cli_io;
pub mod client_tuning;
pub mod error;
pub mod fusion;
pub mod optim;
pub mod region_sampler;
pub mod solvers;
pub mod toy_diffusion;

pub use error::{Error, Result};
