pub mod cam;
pub mod crf;
pub mod error;
pub mod feature;
pub mod geometry;
pub mod image;
pub mod par;
pub mod proposal;
pub mod tensor;

pub use error::{Error, Result};
pub mod detect;
pub mod rng;
pub mod parts;
pub mod encoder;
pub mod pipeline;
