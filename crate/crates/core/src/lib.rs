pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod indexing;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod scene;
pub mod spatial;
pub mod temporal;

pub use error::{Error, Result};
