pub mod codec;
pub mod error;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod speech;
pub mod store;
pub mod synth;
pub mod tasks;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
