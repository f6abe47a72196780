pub mod bilevel;
pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod latent;
pub mod model;
pub mod optim;
pub mod policy;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
