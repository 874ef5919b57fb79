pub mod checks;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod masking;
pub mod model;
pub mod phantom;
pub mod seg_loss;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
