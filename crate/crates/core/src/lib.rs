//! N-best hypothesis self-learning for attention encoder-decoder models.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod selflearn;
pub mod trainer;

pub use error::{Error, Result};
