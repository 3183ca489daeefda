pub mod autodiff;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod depth;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod semantic;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
