pub mod error;
pub mod graph;
pub mod numerics;
pub mod backbone;
pub mod explainer;
pub mod regularizers;
pub mod training;
pub mod explain_eval;
pub mod synthetic;
pub mod checkpoint;
pub mod pipeline;

pub use error::{Error, Result};
