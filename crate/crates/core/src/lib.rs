pub mod autodiff;
pub mod error;
pub mod util;

pub use error::{Error, Result};
pub mod aux_ensemble;
pub mod checkpoint;
pub mod conformer;
pub mod corpus;
pub mod dsp;
pub mod metrics;
pub mod mtl;
pub mod trainer;
