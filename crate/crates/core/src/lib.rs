pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod lora;
pub mod model;
pub mod serving;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
