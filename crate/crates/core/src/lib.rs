pub mod analysis;
pub mod cde;
pub mod data;
pub mod error;
pub mod interp;
pub mod model;
pub mod refiner;
pub mod scoring;
pub mod tensorops;

pub use error::{Result, UfoError};
