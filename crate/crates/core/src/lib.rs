pub mod analysis;
pub mod audio;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod keyeval;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
