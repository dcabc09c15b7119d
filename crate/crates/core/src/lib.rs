pub mod cli;
pub mod counterfact;
pub mod dataio;
pub mod error;
pub mod flow;
pub mod gradcore;
pub mod hypernet;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod service;
pub mod training;
pub use error::{Error, Result};
pub use model::Model;
