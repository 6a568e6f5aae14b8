pub mod attention;
pub mod credit;
pub mod envs;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod learner;
pub mod model;
pub mod ndtensor;
pub mod redistribution;
pub mod verify;

pub use error::{Error, Result};
