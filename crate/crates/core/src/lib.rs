pub mod apps;
pub mod error;
pub mod estimators;
pub mod hypothesis;
pub mod linalg;
pub mod optim;
pub mod simharness;
pub mod statdist;

pub use error::{Error, Result};
