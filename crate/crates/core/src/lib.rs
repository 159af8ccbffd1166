pub mod corpus;
pub mod engagement;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod labeling;
pub mod ranking;
pub mod style;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
