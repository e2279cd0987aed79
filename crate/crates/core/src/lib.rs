pub mod corpus;
pub mod decode;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
